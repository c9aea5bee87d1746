//! Synthetic scenes: simplex abundances, linear / bilinear / post-nonlinear
//! mixing, and additive white Gaussian noise at a prescribed SNR.
//!
//! Randomness is drawn from per-pixel ChaCha streams derived from the scene
//! seed, so every pixel is reproducible on its own and the result does not
//! depend on how pixels are scheduled.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kernel::EndmemberMatrix;

/// Nonnegative proportions summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceVector(Vec<f64>);

impl AbundanceVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("empty abundance vector".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Input(format!(
                "abundances must be finite and nonnegative: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Input(format!("abundances sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// Vertex `k` of the `r`-simplex.
    pub fn vertex(r: usize, k: usize) -> Self {
        let mut v = vec![0.0; r];
        v[k] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Uniform draw from the `(r-1)`-simplex: `r` unit exponentials normalised
/// by their sum (a flat Dirichlet).
pub fn sample_simplex<G: Rng + ?Sized>(r: usize, rng: &mut G) -> AbundanceVector {
    assert!(r >= 1, "simplex dimension must be at least 1");
    if r == 1 {
        return AbundanceVector(vec![1.0]);
    }
    let draws: Vec<f64> = (0..r).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let mut v: Vec<f64> = draws.iter().map(|d| d / total).collect();
    // keep the sum within the stated tolerance after division rounding
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > AbundanceVector::SUM_TOLERANCE {
        v.iter_mut().for_each(|x| *x /= s);
    }
    AbundanceVector(v)
}

/// Mixing mechanism used to synthesize pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MixingModel {
    Lmm,
    /// Generalized bilinear model with a single interaction weight.
    Gbm {
        delta: f64,
    },
    /// Post-nonlinear model `(M alpha)^xi`.
    Pnmm {
        xi: f64,
    },
}

impl MixingModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MixingModel::Lmm => Ok(()),
            MixingModel::Gbm { delta } if (0.0..=1.0).contains(&delta) => Ok(()),
            MixingModel::Gbm { delta } => Err(Error::Parameter(format!(
                "GBM delta must be in [0, 1], got {delta}"
            ))),
            MixingModel::Pnmm { xi } if xi > 0.0 && xi.is_finite() => Ok(()),
            MixingModel::Pnmm { xi } => Err(Error::Parameter(format!(
                "PNMM xi must be positive, got {xi}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixingModel::Lmm => "lmm",
            MixingModel::Gbm { .. } => "gbm",
            MixingModel::Pnmm { .. } => "pnmm",
        }
    }
}

fn check_alpha(m: &EndmemberMatrix, alpha: &[f64]) -> Result<()> {
    if alpha.len() != m.endmembers() {
        return Err(Error::Shape(format!(
            "{} abundances for {} endmembers",
            alpha.len(),
            m.endmembers()
        )));
    }
    Ok(())
}

/// Noiseless linear mixture `M alpha`.
pub fn lmm(m: &EndmemberMatrix, alpha: &[f64]) -> Result<Vec<f64>> {
    check_alpha(m, alpha)?;
    let mat = m.matrix();
    Ok((0..m.bands())
        .map(|l| (0..m.endmembers()).map(|k| mat[(l, k)] * alpha[k]).sum())
        .collect())
}

/// `M alpha + delta * sum_{i<j} alpha_i alpha_j (m_i .* m_j)`.
pub fn gbm(m: &EndmemberMatrix, alpha: &[f64], delta: f64) -> Result<Vec<f64>> {
    MixingModel::Gbm { delta }.validate()?;
    let mut out = lmm(m, alpha)?;
    let mat = m.matrix();
    let r = m.endmembers();
    for (l, o) in out.iter_mut().enumerate() {
        let mut bilinear = 0.0;
        for i in 0..r {
            for j in (i + 1)..r {
                bilinear += alpha[i] * alpha[j] * mat[(l, i)] * mat[(l, j)];
            }
        }
        *o += delta * bilinear;
    }
    Ok(out)
}

/// `(M alpha)^xi` entrywise.
pub fn pnmm(m: &EndmemberMatrix, alpha: &[f64], xi: f64) -> Result<Vec<f64>> {
    MixingModel::Pnmm { xi }.validate()?;
    let linear = lmm(m, alpha)?;
    if xi.fract() != 0.0 {
        if let Some(v) = linear.iter().find(|&&v| v < 0.0) {
            return Err(Error::Parameter(format!(
                "negative base {v} with fractional exponent {xi}"
            )));
        }
    }
    Ok(linear.into_iter().map(|v| v.powf(xi)).collect())
}

pub fn mix(m: &EndmemberMatrix, alpha: &[f64], model: MixingModel) -> Result<Vec<f64>> {
    match model {
        MixingModel::Lmm => lmm(m, alpha),
        MixingModel::Gbm { delta } => gbm(m, alpha, delta),
        MixingModel::Pnmm { xi } => pnmm(m, alpha, xi),
    }
}

/// Adds i.i.d. Gaussian noise of variance `||clean||^2 / (L 10^(snr/10))`.
pub fn add_noise<G: Rng + ?Sized>(clean: &[f64], snr_db: f64, rng: &mut G) -> Result<Vec<f64>> {
    let power: f64 = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    if !(power > 0.0) {
        return Err(Error::Parameter(
            "cannot set an SNR on an all-zero signal".into(),
        ));
    }
    if snr_db.is_nan() {
        return Err(Error::Parameter("SNR is NaN".into()));
    }
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    Ok(clean
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + std * z
        })
        .collect())
}

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pixels (`N x L`) with their ground-truth abundances (`N x R`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub pixels: DMatrix<f64>,
    pub abundances: DMatrix<f64>,
    pub model: MixingModel,
    /// `None` for a noiseless scene.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Sidecar metadata written next to a persisted scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub model: String,
    pub delta: Option<f64>,
    pub xi: Option<f64>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(rename = "L")]
    pub bands: usize,
    #[serde(rename = "R")]
    pub endmembers: usize,
    #[serde(rename = "N")]
    pub pixels: usize,
}

impl SyntheticScene {
    pub fn n_pixels(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn meta(&self) -> SceneMeta {
        let (delta, xi) = match self.model {
            MixingModel::Lmm => (None, None),
            MixingModel::Gbm { delta } => (Some(delta), None),
            MixingModel::Pnmm { xi } => (None, Some(xi)),
        };
        SceneMeta {
            model: self.model.name().into(),
            delta,
            xi,
            snr_db: self.snr_db,
            seed: self.seed,
            bands: self.pixels.ncols(),
            endmembers: self.abundances.ncols(),
            pixels: self.pixels.nrows(),
        }
    }

    /// Writes `<prefix>_pixels.csv`, `<prefix>_abundances.csv` and
    /// `<prefix>_meta.json`, returning the three paths.
    pub fn write(&self, prefix: &str) -> Result<[PathBuf; 3]> {
        let paths = scene_paths(prefix);
        io::write_matrix_csv(&paths[0], &self.pixels, None)?;
        io::write_matrix_csv(&paths[1], &self.abundances, None)?;
        let f = BufWriter::new(File::create(&paths[2])?);
        serde_json::to_writer_pretty(f, &self.meta())?;
        Ok(paths)
    }
}

pub fn scene_paths(prefix: &str) -> [PathBuf; 3] {
    [
        PathBuf::from(format!("{prefix}_pixels.csv")),
        PathBuf::from(format!("{prefix}_abundances.csv")),
        PathBuf::from(format!("{prefix}_meta.json")),
    ]
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<SceneMeta> {
    let f = File::open(path.as_ref())
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.as_ref().display())))?;
    Ok(serde_json::from_reader(f)?)
}

/// Mixes the given abundance rows and adds per-pixel noise.
pub fn render_scene(
    m: &EndmemberMatrix,
    abundances: &DMatrix<f64>,
    model: MixingModel,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<SyntheticScene> {
    model.validate()?;
    if abundances.ncols() != m.endmembers() {
        return Err(Error::Shape(format!(
            "abundance matrix has {} columns for {} endmembers",
            abundances.ncols(),
            m.endmembers()
        )));
    }
    let n = abundances.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let alpha: Vec<f64> = abundances.row(p).iter().copied().collect();
            let clean = mix(m, &alpha, model)?;
            match snr_db {
                Some(snr) => add_noise(&clean, snr, &mut stream_rng(seed, 2 * p as u64 + 1)),
                None => Ok(clean),
            }
        })
        .collect::<Result<_>>()?;
    let pixels = DMatrix::from_fn(n, m.bands(), |i, j| rows[i][j]);
    Ok(SyntheticScene {
        pixels,
        abundances: abundances.clone(),
        model,
        snr_db,
        seed,
    })
}

/// `n` pixels with abundances drawn uniformly from the simplex.
pub fn synth_scene(
    m: &EndmemberMatrix,
    n: usize,
    model: MixingModel,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<SyntheticScene> {
    let r = m.endmembers();
    let draws: Vec<AbundanceVector> = (0..n)
        .into_par_iter()
        .map(|p| sample_simplex(r, &mut stream_rng(seed, 2 * p as u64)))
        .collect();
    let abundances = DMatrix::from_fn(n, r, |i, j| draws[i].as_slice()[j]);
    render_scene(m, &abundances, model, snr_db, seed)
}

/// Smooth synthetic reflectance spectra: each endmember is a baseline plus a
/// slope plus a handful of Gaussian absorption/reflection bumps, clamped to
/// `[0.01, 1]`.
pub fn random_endmembers(bands: usize, endmembers: usize, seed: u64) -> Result<EndmemberMatrix> {
    if bands < 2 || endmembers < 1 {
        return Err(Error::Parameter(format!(
            "need at least 2 bands and 1 endmember, got {bands}x{endmembers}"
        )));
    }
    let mut data = DMatrix::zeros(bands, endmembers);
    for k in 0..endmembers {
        let mut rng = stream_rng(seed, k as u64);
        let base = rng.random_range(0.15..0.55);
        let slope = rng.random_range(-0.25..0.25);
        let n_bumps = rng.random_range(3..=6);
        let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
            .map(|_| {
                (
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.03..0.2),
                    rng.random_range(-0.3..0.4),
                )
            })
            .collect();
        for l in 0..bands {
            let x = l as f64 / (bands - 1) as f64;
            let mut v = base + slope * (x - 0.5);
            for &(c, w, a) in &bumps {
                v += a * (-(x - c) * (x - c) / (2.0 * w * w)).exp();
            }
            data[(l, k)] = v.clamp(0.01, 1.0);
        }
    }
    EndmemberMatrix::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endmembers() -> EndmemberMatrix {
        random_endmembers(40, 3, 5).unwrap()
    }

    #[test]
    fn degenerate_simplex() {
        let mut rng = stream_rng(1, 0);
        assert_eq!(sample_simplex(1, &mut rng).as_slice(), &[1.0]);
    }

    #[test]
    fn simplex_component_means() {
        let mut rng = stream_rng(2, 0);
        let n = 100_000;
        let r = 8;
        let mut sums = [0.0; 8];
        for _ in 0..n {
            let a = sample_simplex(r, &mut rng);
            let s: f64 = a.as_slice().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            for (acc, v) in sums.iter_mut().zip(a.as_slice()) {
                *acc += v;
            }
        }
        // Var of a flat Dirichlet component: (R-1) / (R^2 (R+1))
        let se = ((r as f64 - 1.0) / ((r * r) as f64 * (r as f64 + 1.0)) / n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64 - 0.125).abs() < 3.0 * se, "{}", s / n as f64);
        }
    }

    #[test]
    fn simplex_subregion_volume() {
        // P(alpha_1 > 1/2) on the 2-simplex is (1 - 1/2)^2 = 1/4
        let mut rng = stream_rng(3, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_simplex(3, &mut rng).as_slice()[0] > 0.5)
            .count();
        let p = hits as f64 / n as f64;
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((p - 0.25).abs() < 3.0 * se, "{p}");
    }

    #[test]
    fn lmm_cases() {
        let m = endmembers();
        let col1: Vec<f64> = m.matrix().column(1).iter().copied().collect();
        assert_eq!(lmm(&m, &[0.0, 1.0, 0.0]).unwrap(), col1);
        let m2 = EndmemberMatrix::from_rows(&[vec![0.2, 0.4], vec![0.6, 1.0]]).unwrap();
        let avg = lmm(&m2, &[0.5, 0.5]).unwrap();
        assert!((avg[0] - 0.3).abs() < 1e-15 && (avg[1] - 0.8).abs() < 1e-15);
        assert!(matches!(lmm(&m, &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn lmm_matches_band_dot_products() {
        let m = endmembers();
        let a = [0.2, 0.5, 0.3];
        let y = lmm(&m, &a).unwrap();
        for (l, &yl) in y.iter().enumerate() {
            let dot: f64 = m.band_row(l).iter().zip(&a).map(|(x, w)| x * w).sum();
            assert!((yl - dot).abs() < 1e-15);
        }
    }

    #[test]
    fn gbm_cases() {
        let m = endmembers();
        let a = [0.2, 0.5, 0.3];
        assert_eq!(gbm(&m, &a, 0.0).unwrap(), lmm(&m, &a).unwrap());
        let m2 = EndmemberMatrix::from_rows(&[vec![0.2, 0.4], vec![0.6, 1.0]]).unwrap();
        assert_eq!(gbm(&m2, &[1.0, 0.0], 1.0).unwrap(), vec![0.2, 0.6]);
        assert!(matches!(gbm(&m, &a, 1.5), Err(Error::Parameter(_))));
        assert!(matches!(gbm(&m, &a, -0.1), Err(Error::Parameter(_))));

        let y = gbm(&m, &a, 0.7).unwrap();
        let base = lmm(&m, &a).unwrap();
        let mat = m.matrix();
        for l in 0..m.bands() {
            let mut extra = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    if i < j {
                        extra += a[i] * a[j] * mat[(l, i)] * mat[(l, j)];
                    }
                }
            }
            assert!((y[l] - base[l] - 0.7 * extra).abs() < 1e-15);
        }
    }

    #[test]
    fn pnmm_cases() {
        let m = endmembers();
        let a = [0.2, 0.5, 0.3];
        let base = lmm(&m, &a).unwrap();
        assert_eq!(pnmm(&m, &a, 1.0).unwrap(), base);
        for (s, b) in pnmm(&m, &a, 2.0).unwrap().iter().zip(&base) {
            assert!((s - b * b).abs() < 1e-15);
        }
        for (s, b) in pnmm(&m, &a, 0.7).unwrap().iter().zip(&base) {
            assert_eq!(*s, b.powf(0.7));
        }
        let neg = EndmemberMatrix::from_rows(&[vec![-0.2], vec![0.6]]).unwrap();
        assert!(matches!(pnmm(&neg, &[1.0], 0.7), Err(Error::Parameter(_))));
        assert!(pnmm(&neg, &[1.0], 2.0).is_ok());
        assert!(matches!(pnmm(&m, &a, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn vanishing_noise() {
        let clean = vec![0.3, 0.5, 0.1, 0.9];
        let noisy = add_noise(&clean, 300.0, &mut stream_rng(4, 0)).unwrap();
        for (a, b) in clean.iter().zip(&noisy) {
            assert!((a - b).abs() <= 1e-10 * a.abs());
        }
        assert!(matches!(
            add_noise(&[0.0, 0.0], 21.0, &mut stream_rng(4, 0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn empirical_snr() {
        let clean: Vec<f64> = (0..50).map(|i| 0.2 + 0.01 * i as f64).collect();
        let signal: f64 = clean.iter().map(|v| v * v).sum();
        let mut rng = stream_rng(5, 0);
        let mut noise = 0.0;
        for _ in 0..10_000 {
            let y = add_noise(&clean, 21.0, &mut rng).unwrap();
            noise += y
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let snr = 10.0 * (signal * 10_000.0 / noise).log10();
        assert!((snr - 21.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn noise_is_seed_reproducible() {
        let clean = vec![0.3, 0.5, 0.1];
        let a = add_noise(&clean, 21.0, &mut stream_rng(9, 3)).unwrap();
        let b = add_noise(&clean, 21.0, &mut stream_rng(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pinned_noiseless_pixel_is_the_endmember() {
        let m = endmembers();
        let a = DMatrix::from_row_slice(1, 3, AbundanceVector::vertex(3, 0).as_slice());
        let s = render_scene(&m, &a, MixingModel::Lmm, None, 0).unwrap();
        let col0: Vec<f64> = m.matrix().column(0).iter().copied().collect();
        assert_eq!(s.pixels.row(0).iter().copied().collect::<Vec<_>>(), col0);
    }

    #[test]
    fn gbm_minus_lmm_is_the_bilinear_term() {
        let m = endmembers();
        let g = synth_scene(&m, 5, MixingModel::Gbm { delta: 1.0 }, None, 11).unwrap();
        let l = synth_scene(&m, 5, MixingModel::Lmm, None, 11).unwrap();
        assert_eq!(g.abundances, l.abundances);
        for p in 0..5 {
            let a: Vec<f64> = g.abundances.row(p).iter().copied().collect();
            let want: Vec<f64> = gbm(&m, &a, 1.0)
                .unwrap()
                .iter()
                .zip(lmm(&m, &a).unwrap())
                .map(|(x, y)| x - y)
                .collect();
            for (b, w) in want.iter().enumerate() {
                assert!((g.pixels[(p, b)] - l.pixels[(p, b)] - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scene_shape_and_determinism() {
        let m = random_endmembers(20, 8, 1).unwrap();
        let a = synth_scene(&m, 2000, MixingModel::Pnmm { xi: 0.7 }, Some(21.0), 3).unwrap();
        assert_eq!(a.pixels.shape(), (2000, 20));
        assert_eq!(a.abundances.shape(), (2000, 8));
        for row in a.abundances.row_iter() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
        let b = synth_scene(&m, 2000, MixingModel::Pnmm { xi: 0.7 }, Some(21.0), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn endmembers_are_smooth_and_bounded() {
        let m = random_endmembers(200, 8, 2).unwrap();
        let mat = m.matrix();
        assert!(mat.iter().all(|&v| (0.01..=1.0).contains(&v)));
        for k in 0..8 {
            for l in 1..200 {
                assert!((mat[(l, k)] - mat[(l - 1, k)]).abs() < 0.1);
            }
        }
    }
}
