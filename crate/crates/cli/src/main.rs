//! `kband`: band selection and nonlinear unmixing from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 input or parse error, 4 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kband::clique::{build_adjacency, exhaustive_maximum_clique, maximum_clique_with_budget};
use kband::harness::{
    rmse_abundance, run_experiment, write_reports, ExperimentConfig, REFERENCE_M,
};
use kband::io::{fmt_f64, read_matrix_csv, write_matrix_csv};
use kband::kernel::{gram_matrix, gram_power};
use kband::mixing::{random_endmembers, synth_scene, MixingModel};
use kband::params::{coherence_threshold, solve_bandwidth};
use kband::select::{
    ccbs_relabelled, ccbs_with_budget, gcbs, gkkm_select, random_order, BandDictionary,
};
use kband::unmix::{restrict_bands, unmix_scene, LssvrModel, DEFAULT_MU};
use kband::{dimacs, EndmemberMatrix, Error, GramMatrix};
use nalgebra::DMatrix;
use serde::Serialize;

const AFTER_HELP: &str = "\
Band indices are 0-based in every CSV and JSON file. Clique listings and
DIMACS files use 1-based vertices.

Exit codes: 0 success, 2 usage, 3 input or parse error, 4 numerical failure.";

#[derive(Parser)]
#[command(name = "kband", version, about = "Coherence-based kernel band selection and SK-Hype unmixing", after_help = AFTER_HELP)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: <out>_pixels.csv, <out>_abundances.csv, <out>_meta.json.
    Synth(SynthArgs),
    /// Select a band dictionary and write it as JSON.
    Select(SelectArgs),
    /// Unmix every pixel of a scene.
    Unmix(UnmixArgs),
    /// Maximum clique of a DIMACS graph or of a thresholded Gram matrix.
    Clique(CliqueArgs),
    /// Run an experiment described by a JSON config and write result tables.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Lmm,
    Gbm,
    Pnmm,
}

#[derive(Args)]
struct SynthArgs {
    /// Endmember CSV, one row per band and one column per endmember.
    #[arg(
        long,
        conflicts_with = "random_endmembers",
        required_unless_present = "random_endmembers"
    )]
    endmembers: Option<PathBuf>,
    /// Generate smooth random endmembers with L bands and R materials; also writes <out>_endmembers.csv.
    #[arg(long, value_name = "L,R", value_parser = parse_pair)]
    random_endmembers: Option<(usize, usize)>,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Bilinear weight of the gbm model, in [0, 1].
    #[arg(long)]
    delta: Option<f64>,
    /// Exponent of the pnmm model, positive.
    #[arg(long)]
    xi: Option<f64>,
    /// Signal-to-noise ratio in dB; noiseless when omitted.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    pixels: usize,
    /// Output prefix.
    #[arg(long)]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Gcbs,
    Ccbs,
    Gkkm,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    endmembers: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Dictionary size M fixing the coherence threshold 1/(M-1). For gkkm it fixes the kernel bandwidth.
    #[arg(long)]
    target_m: usize,
    /// Visit bands in a random order (gcbs) or relabel them randomly (ccbs).
    #[arg(long)]
    permute_seed: Option<u64>,
    /// Order penalty of gkkm.
    #[arg(long, default_value_t = 4.0)]
    lambda: f64,
    /// k-means restarts of gkkm.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Cluster counts tried by gkkm.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,30,40,50")]
    m_grid: Vec<usize>,
    /// Abort the clique search after this many nodes.
    #[arg(long)]
    budget: Option<u64>,
    /// Output JSON file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Skhype,
    Lssvr,
}

#[derive(Args)]
struct UnmixArgs {
    /// Pixel CSV, one row per pixel.
    #[arg(long)]
    pixels: PathBuf,
    #[arg(long)]
    endmembers: PathBuf,
    /// Dictionary JSON written by `select`; all bands when omitted.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Kernel bandwidth. Defaults to the dictionary's, or else to the bandwidth of an M=30 dictionary.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MU)]
    mu_reg: f64,
    #[arg(long, value_enum, default_value = "skhype")]
    method: Method,
    /// True abundances; the RMSE is printed when given.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output prefix: <out>_abundances.csv (or <out>_fitted.csv for lssvr) and <out>_pixels.csv.
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct CliqueArgs {
    /// DIMACS graph file.
    #[arg(long, conflicts_with_all = ["gram", "mu0"], required_unless_present = "gram")]
    dimacs: Option<PathBuf>,
    /// Gram matrix CSV; bands i and j are joined when |K_ij| <= mu0.
    #[arg(long, requires = "mu0")]
    gram: Option<PathBuf>,
    #[arg(long)]
    mu0: Option<f64>,
    /// Use exhaustive enumeration instead of branch and bound.
    #[arg(long)]
    oracle: bool,
    /// Abort the search after this many nodes.
    #[arg(long, conflicts_with = "oracle")]
    budget: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output prefix for <out>.csv, <out>_runs.csv, <out>.txt, <out>_nb_rmse.dat and <out>_meta.json.
    #[arg(long)]
    out: String,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Parameter(_)) => 2,
            Failure::Core(e) if e.is_numeric() => 4,
            Failure::Core(_) => 3,
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected L,R")?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let seed = cli.seed.unwrap_or(0);
    let outcome = match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Select(a) => select(a, seed),
        Command::Unmix(a) => unmix(a),
        Command::Clique(a) => clique(a),
        Command::Bench(a) => bench(a, cli.seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn synth(a: SynthArgs, seed: u64) -> CmdResult {
    let model = match (a.model, a.delta, a.xi) {
        (ModelKind::Lmm, None, None) => MixingModel::Lmm,
        (ModelKind::Gbm, Some(delta), None) => MixingModel::Gbm { delta },
        (ModelKind::Pnmm, None, Some(xi)) => MixingModel::Pnmm { xi },
        (ModelKind::Gbm, None, _) => {
            return Err(Failure::Usage("--model gbm needs --delta".into()))
        }
        (ModelKind::Pnmm, _, None) => return Err(Failure::Usage("--model pnmm needs --xi".into())),
        _ => {
            return Err(Failure::Usage(
                "--delta goes with gbm and --xi with pnmm only".into(),
            ))
        }
    };
    let m = match (&a.endmembers, a.random_endmembers) {
        (Some(path), _) => EndmemberMatrix::read_csv(path)?,
        (None, Some((l, r))) => {
            let m = random_endmembers(l, r, seed)?;
            let path = format!("{}_endmembers.csv", a.out);
            m.write_csv(&path)?;
            println!("wrote {path}");
            m
        }
        (None, None) => unreachable!("clap requires one endmember source"),
    };
    let scene = synth_scene(&m, a.pixels, model, a.snr_db, seed)?;
    for p in scene.write(&a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Machine-readable dictionary; `M` is the chosen cluster count for gkkm.
#[derive(Serialize)]
struct DictionaryJson {
    strategy: String,
    #[serde(rename = "M")]
    m: usize,
    mu0: Option<f64>,
    sigma2: f64,
    indices: Vec<usize>,
    coherence: f64,
    #[serde(rename = "Nb")]
    nb: usize,
}

impl From<&BandDictionary> for DictionaryJson {
    fn from(d: &BandDictionary) -> Self {
        DictionaryJson {
            strategy: d.strategy.to_string().to_lowercase(),
            m: d.target_m,
            mu0: d.mu0,
            sigma2: d.sigma2,
            indices: d.indices.clone(),
            coherence: d.coherence,
            nb: d.len(),
        }
    }
}

fn select(a: SelectArgs, seed: u64) -> CmdResult {
    if a.target_m < 2 {
        return Err(Failure::Usage("--target-m must be at least 2".into()));
    }
    let m = EndmemberMatrix::read_csv(&a.endmembers)?;
    let k1 = gram_matrix(&m, 1.0)?;
    let dict = match a.strategy {
        StrategyArg::Gcbs => {
            let order = a.permute_seed.map(|s| random_order(k1.len(), s));
            gcbs(&k1, a.target_m, order.as_deref())?
        }
        StrategyArg::Ccbs => match a.permute_seed {
            Some(s) => ccbs_relabelled(&k1, a.target_m, &random_order(k1.len(), s), a.budget)?,
            None => ccbs_with_budget(&k1, a.target_m, a.budget)?,
        },
        StrategyArg::Gkkm => {
            let sigma2 = solve_bandwidth(&k1, coherence_threshold(a.target_m)?)?;
            let grid: Vec<usize> = a
                .m_grid
                .iter()
                .copied()
                .filter(|&c| c >= 1 && c <= k1.len())
                .collect();
            if grid.is_empty() {
                return Err(Failure::Usage(format!(
                    "--m-grid has no cluster count in 1..={}",
                    k1.len()
                )));
            }
            gkkm_select(&gram_power(&k1, sigma2)?, a.lambda, &grid, a.restarts, seed)?
        }
    };
    let mut json =
        serde_json::to_string_pretty(&DictionaryJson::from(&dict)).map_err(Error::from)?;
    json.push('\n');
    match &a.out {
        Some(path) => fs::write(path, json)?,
        None => std::io::stdout().write_all(json.as_bytes())?,
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct DictionaryFile {
    indices: Vec<usize>,
    sigma2: Option<f64>,
}

fn read_dictionary(path: &Path) -> Result<DictionaryFile, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn unmix(a: UnmixArgs) -> CmdResult {
    let m = EndmemberMatrix::read_csv(&a.endmembers)?;
    let pixels = read_matrix_csv(&a.pixels)?;
    if pixels.ncols() != m.bands() {
        return Err(Error::Shape(format!(
            "pixels have {} bands, endmembers have {}",
            pixels.ncols(),
            m.bands()
        ))
        .into());
    }
    let dict = a.dictionary.as_deref().map(read_dictionary).transpose()?;
    let indices = dict.as_ref().map(|d| d.indices.as_slice());
    let bands = restrict_bands(&m, indices)?;
    let sigma2 = match (a.sigma2, dict.as_ref().and_then(|d| d.sigma2)) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => solve_bandwidth(&gram_matrix(&m, 1.0)?, coherence_threshold(REFERENCE_M)?)?,
    };
    let pixel_path = format!("{}_pixels.csv", a.out);
    match a.method {
        Method::Skhype => {
            let out = unmix_scene(&pixels, &m, Some(&bands), a.mu_reg, sigma2)?;
            let abundances = out.abundances(m.endmembers());
            let abundance_path = format!("{}_abundances.csv", a.out);
            write_matrix_csv(&abundance_path, &abundances, None)?;
            let mut per_pixel = String::from("pixel,u,residual_norm,error\n");
            for (p, res) in out.results.iter().enumerate() {
                match res {
                    Some(r) => {
                        per_pixel +=
                            &format!("{p},{},{},\n", fmt_f64(r.u), fmt_f64(r.residuals.norm()))
                    }
                    None => {
                        let msg = out
                            .failures
                            .iter()
                            .find(|(i, _)| *i == p)
                            .map_or("", |(_, e)| e.as_str());
                        per_pixel += &format!("{p},,,\"{}\"\n", msg.replace('"', "'"));
                    }
                }
            }
            fs::write(&pixel_path, per_pixel)?;
            let n = pixels.nrows();
            let secs = out.elapsed.as_secs_f64();
            println!("method: skhype");
            println!(
                "pixels: {n}, bands used: {} of {}, sigma2: {sigma2:.4e}",
                out.bands_used,
                m.bands()
            );
            println!("failed pixels: {}", out.failures.len());
            println!(
                "time: {secs:.4} s ({:.4} ms per pixel)",
                1e3 * secs / n.max(1) as f64
            );
            if let Some(path) = &a.truth {
                let truth = read_matrix_csv(path)?;
                let ok: Vec<usize> = (0..n).filter(|&p| out.results[p].is_some()).collect();
                if truth.shape() != abundances.shape() {
                    return Err(Error::Shape(format!(
                        "truth is {:?}, estimates are {:?}",
                        truth.shape(),
                        abundances.shape()
                    ))
                    .into());
                }
                if !ok.is_empty() {
                    let rmse =
                        rmse_abundance(&truth.select_rows(&ok), &abundances.select_rows(&ok))?;
                    println!("rmse: {rmse:.4}");
                }
            }
            println!("wrote {abundance_path}\nwrote {pixel_path}");
        }
        Method::Lssvr => {
            let start = Instant::now();
            let model = LssvrModel::new(&m.select_bands(&bands), a.mu_reg, sigma2)?;
            let mut fitted = DMatrix::zeros(pixels.nrows(), bands.len());
            let mut per_pixel = String::from("pixel,u,residual_norm,error\n");
            let mut failures = 0usize;
            for p in 0..pixels.nrows() {
                let r: Vec<f64> = bands.iter().map(|&b| pixels[(p, b)]).collect();
                match model.fit(&r) {
                    Ok(fit) => {
                        fitted.set_row(p, &fit.fitted.transpose());
                        per_pixel += &format!("{p},,{},\n", fmt_f64(fit.residuals.norm()));
                    }
                    Err(e) => {
                        failures += 1;
                        fitted.row_mut(p).fill(f64::NAN);
                        per_pixel += &format!("{p},,,\"{}\"\n", e.to_string().replace('"', "'"));
                    }
                }
            }
            let secs = start.elapsed().as_secs_f64();
            let fitted_path = format!("{}_fitted.csv", a.out);
            write_matrix_csv(&fitted_path, &fitted, None)?;
            fs::write(&pixel_path, per_pixel)?;
            println!("method: lssvr");
            println!(
                "pixels: {}, bands used: {} of {}, sigma2: {sigma2:.4e}",
                pixels.nrows(),
                bands.len(),
                m.bands()
            );
            println!("failed pixels: {failures}");
            println!("time: {secs:.4} s");
            println!("wrote {fitted_path}\nwrote {pixel_path}");
        }
    }
    Ok(())
}

fn clique(a: CliqueArgs) -> CmdResult {
    let graph = match (&a.dimacs, &a.gram) {
        (Some(path), _) => dimacs::read(&fs::read_to_string(path)?)?,
        (None, Some(path)) => {
            let mu0 = a.mu0.expect("clap requires --mu0 with --gram");
            let k = GramMatrix::from_entries(read_matrix_csv(path)?, 1.0)?;
            build_adjacency(&k, mu0)
        }
        (None, None) => unreachable!("clap requires one graph source"),
    };
    let clique = if a.oracle {
        exhaustive_maximum_clique(&graph)
    } else {
        maximum_clique_with_budget(&graph, a.budget)?
    };
    let listed: Vec<String> = clique
        .vertices()
        .iter()
        .map(|v| (v + 1).to_string())
        .collect();
    println!("{}: {}", clique.size(), listed.join(" "));
    Ok(())
}

fn bench(a: BenchArgs, seed: Option<u64>) -> CmdResult {
    let text = fs::read_to_string(&a.config)?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = run_experiment(&cfg)?;
    for p in write_reports(&a.out, &cfg, &out)? {
        println!("wrote {}", p.display());
    }
    print!("{}", kband::harness::format_table(&out.rows));
    Ok(())
}
