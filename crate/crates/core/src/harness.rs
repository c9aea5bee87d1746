//! Metrics and table-style experiment runs.
//!
//! An [`ExperimentConfig`] names a scene and a list of strategies. Each
//! strategy selects bands (timed), unmixes the scene `repetitions` times
//! (timed), and contributes one [`ResultRow`] per requested dictionary size.
//! Standard deviations use the unbiased `n - 1` denominator and are zero for
//! a single sample.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_matrix_csv};
use crate::kernel::{gram_matrix, gram_power, EndmemberMatrix, GramMatrix};
use crate::mixing::{random_endmembers, synth_scene, MixingModel};
use crate::params::{coherence_threshold, solve_bandwidth};
use crate::select::{ccbs, ccbs_relabelled, gcbs, gkkm_select, random_order, BandDictionary};
use crate::unmix::{reconstruct, unmix_scene, SceneUnmixing, DEFAULT_MU};

/// Bandwidth multipliers tried when tuning full-band SK-Hype and GKKM.
pub const SIGMA_MULTIPLIERS: [f64; 5] = [0.5, 1.0, 2.0, 10.0, 20.0];
/// Order penalties tried when tuning GKKM.
pub const GKKM_LAMBDAS: [f64; 3] = [2.0, 4.0, 6.0];
pub const DEFAULT_TUNE_PIXELS: usize = 200;
/// Dictionary size whose bandwidth anchors the tuning grids.
pub const REFERENCE_M: usize = 30;

/// Column header of the results CSV.
pub const CSV_HEADER: &str =
    "strategy,M,mu0,sigma2,Nb,coherence,rmse_mean,rmse_std,time_bs_s,time_unmix_mean_s,time_unmix_std_s";

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty matrices".into()));
    }
    Ok(())
}

fn rms_difference(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

/// `sqrt(1/(N R) sum_n ||alpha_n - alpha*_n||^2)` over `N x R` abundances.
pub fn rmse_abundance(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<f64> {
    rms_difference(truth, est)
}

/// Abundance RMSE of a band-selected estimate against a full-band one.
pub fn rmse_vs_reference(reference: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<f64> {
    rms_difference(reference, est)
}

/// RMS difference over all `N x L` reflectance entries.
pub fn reconstruction_error(pixels: &DMatrix<f64>, reconstructed: &DMatrix<f64>) -> Result<f64> {
    rms_difference(pixels, reconstructed)
}

/// RMSE over the pixels that unmixed successfully.
fn rmse_successful(truth: &DMatrix<f64>, out: &SceneUnmixing) -> Result<f64> {
    let ok: Vec<usize> = (0..out.results.len())
        .filter(|&i| out.results[i].is_some())
        .collect();
    if ok.is_empty() {
        return Err(Error::Degenerate("every pixel failed to unmix".into()));
    }
    let est = out.abundances(truth.ncols());
    let t = truth.select_rows(&ok);
    rmse_abundance(&t, &est.select_rows(&ok))
}

/// Full-band spectra predicted from fits on the bands in `indices`.
pub fn reconstruct_scene(
    m: &EndmemberMatrix,
    pixels: &DMatrix<f64>,
    indices: &[usize],
    mu: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let out = unmix_scene(pixels, m, Some(indices), mu, sigma2)?;
    let mut rec = DMatrix::zeros(pixels.nrows(), m.bands());
    for (p, res) in out.results.iter().enumerate() {
        let res = res.as_ref().ok_or_else(|| {
            Error::Degenerate(format!("pixel {p} failed: {}", failure_message(&out, p)))
        })?;
        let spectrum = reconstruct(m, indices, &res.linear, &res.psi, sigma2)?;
        rec.set_row(p, &spectrum.transpose());
    }
    Ok(rec)
}

fn failure_message(out: &SceneUnmixing, p: usize) -> String {
    out.failures
        .iter()
        .find(|(i, _)| *i == p)
        .map_or_else(String::new, |(_, e)| e.clone())
}

/// Mean and unbiased standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, n }
    }
}

/// Where the endmember matrix of a synthetic scene comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EndmemberSource {
    Random {
        bands: usize,
        endmembers: usize,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SceneSpec {
    Synthetic {
        endmembers: EndmemberSource,
        model: MixingModel,
        pixels: usize,
        #[serde(default)]
        snr_db: Option<f64>,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Files {
        endmembers: PathBuf,
        pixels: PathBuf,
        abundances: PathBuf,
    },
}

/// Endmembers, observed pixels (`N x L`) and true abundances (`N x R`).
#[derive(Debug, Clone)]
pub struct Scene {
    pub endmembers: EndmemberMatrix,
    pub pixels: DMatrix<f64>,
    pub abundances: DMatrix<f64>,
}

impl SceneSpec {
    pub fn load(&self, default_seed: u64) -> Result<Scene> {
        match self {
            SceneSpec::Synthetic {
                endmembers,
                model,
                pixels,
                snr_db,
                seed,
            } => {
                let m = match endmembers {
                    EndmemberSource::Random {
                        bands,
                        endmembers,
                        seed: s,
                    } => random_endmembers(*bands, *endmembers, s.unwrap_or(default_seed))?,
                    EndmemberSource::File(path) => EndmemberMatrix::read_csv(path)?,
                };
                let scene =
                    synth_scene(&m, *pixels, *model, *snr_db, seed.unwrap_or(default_seed))?;
                Ok(Scene {
                    endmembers: m,
                    pixels: scene.pixels,
                    abundances: scene.abundances,
                })
            }
            SceneSpec::Files {
                endmembers,
                pixels,
                abundances,
            } => {
                let m = EndmemberMatrix::read_csv(endmembers)?;
                let px = read_matrix_csv(pixels)?;
                let ab = read_matrix_csv(abundances)?;
                if px.ncols() != m.bands()
                    || ab.ncols() != m.endmembers()
                    || ab.nrows() != px.nrows()
                {
                    return Err(Error::Shape(format!(
                        "pixels {:?}, abundances {:?} and endmembers {}x{} disagree",
                        px.shape(),
                        ab.shape(),
                        m.bands(),
                        m.endmembers()
                    )));
                }
                Ok(Scene {
                    endmembers: m,
                    pixels: px,
                    abundances: ab,
                })
            }
        }
    }
}

fn default_multipliers() -> Vec<f64> {
    SIGMA_MULTIPLIERS.to_vec()
}

fn default_lambdas() -> Vec<f64> {
    GKKM_LAMBDAS.to_vec()
}

fn default_m_grid() -> Vec<usize> {
    vec![5, 10, 20, 30, 40, 50]
}

fn default_restarts() -> usize {
    5
}

/// One strategy and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategySpec {
    /// SK-Hype on every band; the bandwidth is tuned over multiples of the
    /// reference bandwidth.
    Full {
        #[serde(default = "default_multipliers")]
        sigma_multipliers: Vec<f64>,
    },
    /// Greedy selection, one row per entry of `m`. With `random_orders`,
    /// the greedy pass is repeated over that many random band orders.
    Gcbs {
        m: Vec<usize>,
        #[serde(default)]
        random_orders: Option<usize>,
    },
    /// Clique selection, one row per entry of `m`. With `random_orders`,
    /// the bands are relabelled by that many random permutations.
    Ccbs {
        m: Vec<usize>,
        #[serde(default)]
        random_orders: Option<usize>,
    },
    /// Kernel k-means with `(lambda, sigma)` tuned over the given grids.
    Gkkm {
        #[serde(default = "default_lambdas")]
        lambda: Vec<f64>,
        #[serde(default = "default_multipliers")]
        sigma_multipliers: Vec<f64>,
        #[serde(default = "default_m_grid")]
        m_grid: Vec<usize>,
        #[serde(default = "default_restarts")]
        restarts: usize,
    },
}

fn default_mu_reg() -> f64 {
    DEFAULT_MU
}

fn default_repetitions() -> usize {
    1
}

fn default_tune_pixels() -> usize {
    DEFAULT_TUNE_PIXELS
}

fn default_reference_m() -> usize {
    REFERENCE_M
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub strategies: Vec<StrategySpec>,
    #[serde(default = "default_mu_reg")]
    pub mu_reg: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Leading pixels used to tune the full-band and GKKM bandwidths.
    #[serde(default = "default_tune_pixels")]
    pub tune_pixels: usize,
    /// Dictionary size whose bandwidth scales the tuning grids.
    #[serde(default = "default_reference_m")]
    pub reference_m: usize,
}

fn invalid(path: String, msg: &str) -> Error {
    Error::Parameter(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("{path}: {}", e.into_inner())
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Parameter(msg) => msg,
            other => other.to_string(),
        })?;
        Ok(cfg)
    }

    /// Semantic checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return Err(invalid("repetitions".into(), "must be at least 1"));
        }
        if !(self.mu_reg > 0.0) || !self.mu_reg.is_finite() {
            return Err(invalid("mu_reg".into(), "must be positive"));
        }
        if self.tune_pixels < 1 {
            return Err(invalid("tune_pixels".into(), "must be at least 1"));
        }
        if self.reference_m < 3 {
            return Err(invalid("reference_m".into(), "must be at least 3"));
        }
        if self.strategies.is_empty() {
            return Err(invalid(
                "strategies".into(),
                "must list at least one strategy",
            ));
        }
        if let SceneSpec::Synthetic { model, pixels, .. } = &self.scene {
            model
                .validate()
                .map_err(|e| invalid("scene.model".into(), &e.to_string()))?;
            if *pixels < 1 {
                return Err(invalid("scene.pixels".into(), "must be at least 1"));
            }
        }
        for (i, s) in self.strategies.iter().enumerate() {
            let at = |field: &str| format!("strategies[{i}].{field}");
            let check_multipliers = |v: &[f64]| -> Result<()> {
                if v.is_empty() || v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(invalid(
                        at("sigma_multipliers"),
                        "must be a non-empty list of positive numbers",
                    ));
                }
                Ok(())
            };
            match s {
                StrategySpec::Full { sigma_multipliers } => check_multipliers(sigma_multipliers)?,
                StrategySpec::Gcbs { m, random_orders }
                | StrategySpec::Ccbs { m, random_orders } => {
                    if m.is_empty() {
                        return Err(invalid(at("m"), "must list at least one dictionary size"));
                    }
                    if let Some(k) = m.iter().position(|&x| x < 3) {
                        return Err(invalid(at(&format!("m[{k}]")), "must be at least 3"));
                    }
                    if *random_orders == Some(0) {
                        return Err(invalid(at("random_orders"), "must be at least 1"));
                    }
                }
                StrategySpec::Gkkm {
                    lambda,
                    sigma_multipliers,
                    m_grid,
                    restarts,
                } => {
                    check_multipliers(sigma_multipliers)?;
                    if lambda.is_empty() || lambda.iter().any(|&x| !(x >= 0.0)) {
                        return Err(invalid(
                            at("lambda"),
                            "must be a non-empty list of nonnegative numbers",
                        ));
                    }
                    if m_grid.is_empty() || m_grid.contains(&0) {
                        return Err(invalid(
                            at("m_grid"),
                            "must be a non-empty list of positive sizes",
                        ));
                    }
                    if *restarts < 1 {
                        return Err(invalid(at("restarts"), "must be at least 1"));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Aggregated outcome of one strategy at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub m: Option<usize>,
    pub mu0: Option<f64>,
    pub sigma2: f64,
    pub nb: Summary,
    /// Largest dictionary coherence over the runs; `None` for all bands.
    pub coherence: Option<f64>,
    pub rmse: Summary,
    /// Mean band selection time; `None` when no selection happens.
    pub time_bs: Option<f64>,
    pub time_unmix: Summary,
    pub pixel_failures: usize,
    /// Set when the strategy failed; numeric fields are then meaningless.
    pub error: Option<String>,
}

impl ResultRow {
    fn failed(label: String, m: Option<usize>, error: String) -> Self {
        let nan = Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
        ResultRow {
            label,
            m,
            mu0: None,
            sigma2: f64::NAN,
            nb: nan,
            coherence: None,
            rmse: nan,
            time_bs: None,
            time_unmix: nan,
            pixel_failures: 0,
            error: Some(error),
        }
    }

    /// Band selection plus mean unmixing time.
    pub fn total_time(&self) -> f64 {
        self.time_bs.unwrap_or(0.0) + self.time_unmix.mean
    }
}

/// One unmixing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub label: String,
    pub m: Option<usize>,
    /// Index of the random order or permutation; 0 for deterministic runs.
    pub order: usize,
    pub repetition: usize,
    pub nb: usize,
    pub coherence: Option<f64>,
    pub sigma2: f64,
    pub rmse: f64,
    pub time_bs_s: Option<f64>,
    pub time_unmix_s: f64,
    pub pixel_failures: usize,
}

/// A bandwidth (and penalty) candidate scored on the tuning pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub label: String,
    pub sigma_multiplier: f64,
    pub lambda: Option<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub records: Vec<RawRecord>,
    pub tuning: Vec<TuningRecord>,
    /// Bandwidth solving the coherence condition at `reference_m`.
    pub reference_sigma2: f64,
    pub bands: usize,
    pub pixels: usize,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    scene: &'a Scene,
    k1: GramMatrix,
    reference_sigma2: f64,
    tune: usize,
    records: Vec<RawRecord>,
    tuning: Vec<TuningRecord>,
}

/// A dictionary with the time taken to select it.
struct Selection {
    dict: BandDictionary,
    seconds: f64,
}

impl Runner<'_> {
    fn tune_rmse(&self, indices: Option<&[usize]>, sigma2: f64) -> Result<f64> {
        let px = self.scene.pixels.rows(0, self.tune).into_owned();
        let truth = self.scene.abundances.rows(0, self.tune).into_owned();
        let out = unmix_scene(
            &px,
            &self.scene.endmembers,
            indices,
            self.cfg.mu_reg,
            sigma2,
        )?;
        rmse_successful(&truth, &out)
    }

    /// Unmixes `repetitions` times with one band set and records each run.
    fn unmix_runs(
        &mut self,
        label: &str,
        m: Option<usize>,
        order: usize,
        selection: Option<&Selection>,
        sigma2: f64,
    ) -> Result<()> {
        let indices = selection.map(|s| s.dict.indices.as_slice());
        for repetition in 0..self.cfg.repetitions {
            let out = unmix_scene(
                &self.scene.pixels,
                &self.scene.endmembers,
                indices,
                self.cfg.mu_reg,
                sigma2,
            )?;
            let rmse = rmse_successful(&self.scene.abundances, &out)?;
            self.records.push(RawRecord {
                label: label.to_string(),
                m,
                order,
                repetition,
                nb: out.bands_used,
                coherence: selection.map(|s| s.dict.coherence),
                sigma2,
                rmse,
                time_bs_s: selection.map(|s| s.seconds),
                time_unmix_s: out.elapsed.as_secs_f64(),
                pixel_failures: out.failures.len(),
            });
        }
        Ok(())
    }

    fn row_from_records(
        &self,
        label: &str,
        m: Option<usize>,
        mu0: Option<f64>,
        sigma2: f64,
    ) -> ResultRow {
        let recs: Vec<&RawRecord> = self
            .records
            .iter()
            .filter(|r| r.label == label && r.m == m)
            .collect();
        let pick = |f: &dyn Fn(&RawRecord) -> f64| recs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        // band selection happens once per order, not once per repetition
        let bs: Vec<f64> = recs
            .iter()
            .filter(|r| r.repetition == 0)
            .filter_map(|r| r.time_bs_s)
            .collect();
        let nb: Vec<f64> = recs
            .iter()
            .filter(|r| r.repetition == 0)
            .map(|r| r.nb as f64)
            .collect();
        ResultRow {
            label: label.to_string(),
            m,
            mu0,
            sigma2,
            nb: Summary::of(&nb),
            coherence: recs.iter().filter_map(|r| r.coherence).reduce(f64::max),
            rmse: Summary::of(&pick(&|r| r.rmse)),
            time_bs: if bs.is_empty() {
                None
            } else {
                Some(Summary::of(&bs).mean)
            },
            time_unmix: Summary::of(&pick(&|r| r.time_unmix_s)),
            pixel_failures: recs.iter().map(|r| r.pixel_failures).sum(),
            error: None,
        }
    }

    fn run_full(&mut self, multipliers: &[f64]) -> Result<ResultRow> {
        let label = "SK-Hype";
        let mut best: Option<(f64, f64)> = None;
        for &mult in multipliers {
            let sigma2 = self.reference_sigma2 * mult * mult;
            let rmse = self.tune_rmse(None, sigma2)?;
            self.tuning.push(TuningRecord {
                label: label.into(),
                sigma_multiplier: mult,
                lambda: None,
                rmse,
            });
            if best.is_none_or(|(r, _)| rmse < r) {
                best = Some((rmse, sigma2));
            }
        }
        let sigma2 = best.expect("non-empty multiplier grid").1;
        self.unmix_runs(label, None, 0, None, sigma2)?;
        Ok(self.row_from_records(label, None, None, sigma2))
    }

    fn select_coherent(
        &self,
        ccbs_mode: bool,
        m: usize,
        order: Option<&[usize]>,
    ) -> Result<Selection> {
        let start = Instant::now();
        let k1 = gram_matrix(&self.scene.endmembers, 1.0)?;
        let dict = match (ccbs_mode, order) {
            (false, o) => gcbs(&k1, m, o)?,
            (true, None) => ccbs(&k1, m)?,
            (true, Some(perm)) => ccbs_relabelled(&k1, m, perm, None)?,
        };
        Ok(Selection {
            dict,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn run_coherent(
        &mut self,
        ccbs_mode: bool,
        m: usize,
        random_orders: Option<usize>,
    ) -> Result<ResultRow> {
        let base = if ccbs_mode { "CCBS" } else { "GCBS" };
        let mu0 = coherence_threshold(m)?;
        match random_orders {
            None => {
                let sel = self.select_coherent(ccbs_mode, m, None)?;
                let sigma2 = sel.dict.sigma2;
                self.unmix_runs(base, Some(m), 0, Some(&sel), sigma2)?;
                Ok(self.row_from_records(base, Some(m), Some(mu0), sigma2))
            }
            Some(n) => {
                let label = format!("{base} (r)");
                let l = self.scene.endmembers.bands();
                let salt = if ccbs_mode { 0xC11C } else { 0x6C85 };
                let mut sigma2 = f64::NAN;
                for k in 0..n {
                    let order_seed =
                        (self.cfg.seed ^ salt ^ ((m as u64) << 32)).wrapping_add(k as u64);
                    let perm = random_order(l, order_seed);
                    let sel = self.select_coherent(ccbs_mode, m, Some(&perm))?;
                    sigma2 = sel.dict.sigma2;
                    self.unmix_runs(&label, Some(m), k, Some(&sel), sigma2)?;
                }
                Ok(self.row_from_records(&label, Some(m), Some(mu0), sigma2))
            }
        }
    }

    fn run_gkkm(
        &mut self,
        lambdas: &[f64],
        multipliers: &[f64],
        m_grid: &[usize],
        restarts: usize,
    ) -> Result<ResultRow> {
        let label = "GKKM";
        let l = self.scene.endmembers.bands();
        let grid: Vec<usize> = m_grid.iter().copied().filter(|&m| m <= l).collect();
        if grid.is_empty() {
            return Err(Error::Parameter(format!(
                "no cluster count in the grid fits {l} bands"
            )));
        }
        let mut best: Option<(f64, f64, f64)> = None;
        for &mult in multipliers {
            let sigma2 = self.reference_sigma2 * mult * mult;
            let k = gram_power(&self.k1, sigma2)?;
            for &lambda in lambdas {
                let dict = gkkm_select(&k, lambda, &grid, restarts, self.cfg.seed)?;
                let rmse = self.tune_rmse(Some(&dict.indices), sigma2)?;
                self.tuning.push(TuningRecord {
                    label: label.into(),
                    sigma_multiplier: mult,
                    lambda: Some(lambda),
                    rmse,
                });
                if best.is_none_or(|(r, _, _)| rmse < r) {
                    best = Some((rmse, sigma2, lambda));
                }
            }
        }
        let (_, sigma2, lambda) = best.expect("non-empty grids");
        let start = Instant::now();
        let k1 = gram_matrix(&self.scene.endmembers, 1.0)?;
        let dict = gkkm_select(
            &gram_power(&k1, sigma2)?,
            lambda,
            &grid,
            restarts,
            self.cfg.seed,
        )?;
        let sel = Selection {
            dict,
            seconds: start.elapsed().as_secs_f64(),
        };
        let m = sel.dict.target_m;
        self.unmix_runs(label, Some(m), 0, Some(&sel), sigma2)?;
        Ok(self.row_from_records(label, Some(m), None, sigma2))
    }
}

/// Runs every strategy of `cfg` in order. A failing strategy yields a row
/// carrying its error and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let scene = cfg.scene.load(cfg.seed)?;
    run_on_scene(cfg, &scene)
}

/// As [`run_experiment`] on an already loaded scene.
pub fn run_on_scene(cfg: &ExperimentConfig, scene: &Scene) -> Result<ExperimentOutput> {
    let k1 = gram_matrix(&scene.endmembers, 1.0)?;
    let reference_sigma2 = solve_bandwidth(&k1, coherence_threshold(cfg.reference_m)?)?;
    let mut runner = Runner {
        cfg,
        scene,
        k1,
        reference_sigma2,
        tune: cfg.tune_pixels.min(scene.pixels.nrows()),
        records: Vec::new(),
        tuning: Vec::new(),
    };
    let mut rows = Vec::new();
    for spec in &cfg.strategies {
        match spec {
            StrategySpec::Full { sigma_multipliers } => {
                let row = runner.run_full(sigma_multipliers);
                rows.push(
                    row.unwrap_or_else(|e| {
                        ResultRow::failed("SK-Hype".into(), None, e.to_string())
                    }),
                );
            }
            StrategySpec::Gcbs { m, random_orders } | StrategySpec::Ccbs { m, random_orders } => {
                let ccbs_mode = matches!(spec, StrategySpec::Ccbs { .. });
                for &mm in m {
                    let row = runner.run_coherent(ccbs_mode, mm, *random_orders);
                    rows.push(row.unwrap_or_else(|e| {
                        let base = if ccbs_mode { "CCBS" } else { "GCBS" };
                        let label = if random_orders.is_some() {
                            format!("{base} (r)")
                        } else {
                            base.into()
                        };
                        ResultRow::failed(label, Some(mm), e.to_string())
                    }));
                }
            }
            StrategySpec::Gkkm {
                lambda,
                sigma_multipliers,
                m_grid,
                restarts,
            } => {
                let row = runner.run_gkkm(lambda, sigma_multipliers, m_grid, *restarts);
                rows.push(
                    row.unwrap_or_else(|e| ResultRow::failed("GKKM".into(), None, e.to_string())),
                );
            }
        }
    }
    Ok(ExperimentOutput {
        rows,
        records: runner.records,
        tuning: runner.tuning,
        reference_sigma2,
        bands: scene.endmembers.bands(),
        pixels: scene.pixels.nrows(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(fmt_f64).unwrap_or_default()
}

fn finite(v: f64) -> String {
    opt(Some(v))
}

fn nb_field(nb: &Summary) -> String {
    if nb.std == 0.0 && nb.mean.fract() == 0.0 && nb.mean.is_finite() {
        format!("{}", nb.mean as u64)
    } else {
        finite(nb.mean)
    }
}

/// Results CSV with the [`CSV_HEADER`] columns; not-applicable fields are empty.
pub fn write_results_csv<W: Write>(out: &mut W, rows: &[ResultRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            opt(r.mu0),
            finite(r.sigma2),
            nb_field(&r.nb),
            opt(r.coherence),
            finite(r.rmse.mean),
            finite(r.rmse.std),
            opt(r.time_bs),
            finite(r.time_unmix.mean),
            finite(r.time_unmix.std),
        )?;
    }
    Ok(())
}

/// Per-run CSV of [`RawRecord`]s.
pub fn write_records_csv<W: Write>(out: &mut W, records: &[RawRecord]) -> Result<()> {
    writeln!(out, "strategy,M,order,repetition,Nb,coherence,sigma2,rmse,time_bs_s,time_unmix_s,pixel_failures")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            r.order,
            r.repetition,
            r.nb,
            opt(r.coherence),
            finite(r.sigma2),
            finite(r.rmse),
            opt(r.time_bs_s),
            finite(r.time_unmix_s),
            r.pixel_failures,
        )?;
    }
    Ok(())
}

fn pm(s: &Summary) -> String {
    if s.mean.is_finite() {
        format!("{:.4} ± {:.4}", s.mean, s.std)
    } else {
        "-".into()
    }
}

/// Aligned human-readable table, 4 decimals. Time is selection plus mean
/// unmixing, in seconds.
pub fn format_table(rows: &[ResultRow]) -> String {
    let header = ["Strategy", "M", "RMSE ± STD", "Time (s) ± STD", "Nb", "mu"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            if let Some(e) = &r.error {
                return [
                    r.label.clone(),
                    r.m.map_or("-".into(), |m| m.to_string()),
                    format!("failed: {e}"),
                    String::new(),
                    String::new(),
                    String::new(),
                ];
            }
            let time = Summary {
                mean: r.total_time(),
                ..r.time_unmix
            };
            let nb = if r.nb.std == 0.0 {
                nb_field(&r.nb)
            } else {
                format!("{:.1} ± {:.1}", r.nb.mean, r.nb.std)
            };
            [
                r.label.clone(),
                r.m.map_or("-".into(), |m| m.to_string()),
                pm(&r.rmse),
                pm(&time),
                nb,
                r.coherence.map_or("-".into(), |c| format!("{c:.4}")),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&header.map(String::from));
    s += &line(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for row in &body {
        s += &line(row);
    }
    s
}

/// Two-column `Nb rmse` series for plotting, one line per successful row.
pub fn format_nb_rmse(rows: &[ResultRow]) -> String {
    let mut s = String::from("# Nb rmse\n");
    for r in rows
        .iter()
        .filter(|r| r.error.is_none() && r.rmse.mean.is_finite())
    {
        s += &format!("{} {}\n", fmt_f64(r.nb.mean), fmt_f64(r.rmse.mean));
    }
    s
}

/// Sidecar describing how a result set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub bands: usize,
    pub pixels: usize,
    pub reference_sigma2: f64,
    pub repetitions: usize,
    pub mu_reg: f64,
    pub tuning: Vec<TuningRecord>,
}

impl RunMetadata {
    pub fn new(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Self {
        RunMetadata {
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            bands: out.bands,
            pixels: out.pixels,
            reference_sigma2: out.reference_sigma2,
            repetitions: cfg.repetitions,
            mu_reg: cfg.mu_reg,
            tuning: out.tuning.clone(),
        }
    }
}

/// Writes `<prefix>.csv`, `<prefix>_runs.csv`, `<prefix>.txt`,
/// `<prefix>_nb_rmse.dat` and `<prefix>_meta.json`.
pub fn write_reports(
    prefix: &str,
    cfg: &ExperimentConfig,
    out: &ExperimentOutput,
) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = [".csv", "_runs.csv", ".txt", "_nb_rmse.dat", "_meta.json"]
        .iter()
        .map(|s| PathBuf::from(format!("{prefix}{s}")))
        .collect();
    let create = |p: &Path| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(p)?)) };
    let mut f = create(&paths[0])?;
    write_results_csv(&mut f, &out.rows)?;
    f.flush()?;
    let mut f = create(&paths[1])?;
    write_records_csv(&mut f, &out.records)?;
    f.flush()?;
    std::fs::write(&paths[2], format_table(&out.rows))?;
    std::fs::write(&paths[3], format_nb_rmse(&out.rows))?;
    let mut f = create(&paths[4])?;
    serde_json::to_writer_pretty(&mut f, &RunMetadata::new(cfg, out))?;
    f.flush()?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_values() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8]);
        assert_eq!(rmse_abundance(&a, &a).unwrap(), 0.0);
        let one = DMatrix::from_element(1, 1, 0.3);
        let two = DMatrix::from_element(1, 1, 0.55);
        assert!((rmse_abundance(&one, &two).unwrap() - 0.25).abs() < 1e-15);
        let b = DMatrix::from_row_slice(2, 2, &[0.6, 0.5, 0.2, 0.9]);
        assert!((rmse_abundance(&a, &b).unwrap() - 0.070_710_678).abs() < 1e-6);
        assert!(matches!(rmse_abundance(&a, &one), Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruction_offset() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        assert_eq!(reconstruction_error(&a, &a).unwrap(), 0.0);
        let shifted = a.add_scalar(0.03);
        assert!((reconstruction_error(&a, &shifted).unwrap() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn summary_uses_unbiased_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).std, 0.0);
    }

    fn small_config(strategies: &str, reps: usize) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "scene": {{"synthetic": {{"endmembers": {{"random": {{"bands": 60, "endmembers": 3}}}},
                           "model": {{"kind": "gbm", "delta": 1.0}}, "pixels": 20, "snr_db": 30.0}}}},
                "strategies": {strategies},
                "repetitions": {reps},
                "seed": 3,
                "tune_pixels": 10
            }}"#
        );
        ExperimentConfig::from_json(&text).unwrap()
    }

    #[test]
    fn single_repetition_has_zero_rmse_spread() {
        let cfg = small_config(r#"[{"ccbs": {"m": [10]}}]"#, 1);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 1);
        let r = &out.rows[0];
        assert_eq!(r.rmse.std, 0.0);
        assert!(r.coherence.unwrap() <= r.mu0.unwrap());
    }

    #[test]
    fn full_band_row_has_every_band_and_no_coherence() {
        let cfg = small_config(r#"[{"full": {"sigma_multipliers": [1.0, 2.0]}}]"#, 2);
        let out = run_experiment(&cfg).unwrap();
        let r = &out.rows[0];
        assert_eq!(r.nb.mean, 60.0);
        assert_eq!(r.coherence, None);
        assert_eq!(r.mu0, None);
        assert_eq!(r.time_bs, None);
        let mut csv = Vec::new();
        write_results_csv(&mut csv, &out.rows).unwrap();
        let line = String::from_utf8(csv)
            .unwrap()
            .lines()
            .nth(1)
            .unwrap()
            .to_string();
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 11);
        assert_eq!(
            (f[0], f[1], f[2], f[4], f[5], f[8]),
            ("SK-Hype", "", "", "60", "", "")
        );
        assert_eq!(out.tuning.len(), 2);
    }

    #[test]
    fn randomized_orders_vary_greedy_but_not_clique_size() {
        let cfg = small_config(
            r#"[{"gcbs": {"m": [10], "random_orders": 8}}, {"ccbs": {"m": [10], "random_orders": 4}}]"#,
            1,
        );
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows[0].label, "GCBS (r)");
        assert_eq!(out.rows[0].nb.n, 8);
        assert_eq!(out.rows[1].nb.std, 0.0);
        assert!(out.rows[1].nb.mean >= out.rows[0].nb.mean);
    }

    #[test]
    fn identical_config_reproduces_numbers() {
        let cfg = small_config(
            r#"[{"gcbs": {"m": [5, 10]}}, {"gkkm": {"lambda": [2.0], "sigma_multipliers": [1.0], "m_grid": [3, 5]}}]"#,
            1,
        );
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                (x.rmse.mean, x.nb.mean, x.coherence, x.sigma2),
                (y.rmse.mean, y.nb.mean, y.coherence, y.sigma2)
            );
        }
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.rows[2].mu0, None);
    }

    #[test]
    fn failing_strategy_is_reported_in_row() {
        let mut cfg = small_config(r#"[{"ccbs": {"m": [10]}}, {"gcbs": {"m": [10]}}]"#, 1);
        cfg.strategies[0] = StrategySpec::Gkkm {
            lambda: vec![1.0],
            sigma_multipliers: vec![1.0],
            m_grid: vec![500],
            restarts: 1,
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.rows[0].error.is_some());
        assert!(out.rows[1].error.is_none());
        assert!(format_table(&out.rows).contains("failed"));
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad_type = r#"{"scene": {"synthetic": {"endmembers": {"random": {"bands": 10, "endmembers": 2}},
            "model": {"kind": "lmm"}, "pixels": "many"}}, "strategies": []}"#;
        let e = ExperimentConfig::from_json(bad_type).unwrap_err();
        assert!(e.starts_with("scene.synthetic.pixels"), "{e}");

        let bad_value = r#"{"scene": {"synthetic": {"endmembers": {"random": {"bands": 10, "endmembers": 2}},
            "model": {"kind": "lmm"}, "pixels": 5}}, "strategies": [{"ccbs": {"m": [10, 1]}}]}"#;
        let e = ExperimentConfig::from_json(bad_value).unwrap_err();
        assert!(e.starts_with("strategies[0].m[1]"), "{e}");

        let unknown = r#"{"scene": {"synthetic": {"endmembers": {"random": {"bands": 10, "endmembers": 2}},
            "model": {"kind": "lmm"}, "pixels": 5}}, "strategies": [{"ccbs": {"m": [10]}}], "reps": 3}"#;
        assert!(ExperimentConfig::from_json(unknown).is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let a = small_config(r#"[{"ccbs": {"m": [10]}}]"#, 1);
        let b = small_config(r#"[{"ccbs": {"m": [10]}}]"#, 1);
        let c = small_config(r#"[{"ccbs": {"m": [11]}}]"#, 1);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn table_and_plot_series() {
        let cfg = small_config(r#"[{"ccbs": {"m": [5, 10]}}]"#, 2);
        let out = run_experiment(&cfg).unwrap();
        let t = format_table(&out.rows);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().next().unwrap().starts_with("Strategy"));
        let d = format_nb_rmse(&out.rows);
        assert_eq!(d.lines().count(), 3);
    }
}
