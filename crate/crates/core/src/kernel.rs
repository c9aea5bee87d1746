//! Gaussian kernel, Gram matrices over band rows, and dictionary coherence.
//!
//! Band `l` is represented by the `l`-th row of the `L x R` endmember matrix,
//! i.e. the reflectances of all endmembers at that wavelength.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io;

/// `L x R` endmember reflectances. Columns are endmember signatures, rows are
/// per-band signature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    data: DMatrix<f64>,
}

impl EndmemberMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::Input(format!(
                "endmember matrix needs at least 2 bands, got {}",
                data.nrows()
            )));
        }
        if data.ncols() < 1 {
            return Err(Error::Input("endmember matrix has no endmembers".into()));
        }
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite reflectance {v} at band {}, endmember {}",
                idx % data.nrows(),
                idx / data.nrows()
            )));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Shape("endmember rows have different lengths".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    /// Reads `L` rows by `R` columns, with an optional `#` header line.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(io::read_matrix_csv(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_matrix_csv(path, &self.data, None)
    }

    /// Number of bands `L`.
    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    /// Number of endmembers `R`.
    pub fn endmembers(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn band_row(&self, band: usize) -> Vec<f64> {
        self.data.row(band).iter().copied().collect()
    }

    /// Rows restricted to `indices`, in the given order.
    pub fn select_bands(&self, indices: &[usize]) -> DMatrix<f64> {
        self.data.select_rows(indices)
    }
}

/// Symmetric, unit-diagonal Gaussian Gram matrix over band rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    sigma2: f64,
}

impl GramMatrix {
    /// Wraps precomputed entries after checking symmetry, unit diagonal and
    /// the `[0, 1]` range. Entries may underflow to zero for very small
    /// bandwidths, so zero is accepted.
    pub fn from_entries(entries: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        check_bandwidth(sigma2)?;
        let n = entries.nrows();
        if n != entries.ncols() {
            return Err(Error::Shape(format!(
                "Gram matrix is {}x{}",
                n,
                entries.ncols()
            )));
        }
        for i in 0..n {
            if entries[(i, i)] != 1.0 {
                return Err(Error::Input(format!(
                    "Gram diagonal entry {i} is {}",
                    entries[(i, i)]
                )));
            }
            for j in 0..i {
                let v = entries[(i, j)];
                if v != entries[(j, i)] {
                    return Err(Error::Input(format!(
                        "Gram matrix not symmetric at ({i}, {j})"
                    )));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!(
                        "Gram entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self { entries, sigma2 })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn submatrix(&self, indices: &[usize]) -> DMatrix<f64> {
        self.entries.select_rows(indices).select_columns(indices)
    }
}

fn check_bandwidth(sigma2: f64) -> Result<()> {
    if sigma2.is_finite() && sigma2 > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "kernel bandwidth sigma^2 must be positive, got {sigma2}"
        )))
    }
}

/// `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma2: f64) -> Result<f64> {
    check_bandwidth(sigma2)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite kernel argument".into()));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * sigma2)).exp())
}

fn row_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|k| {
            let d = a[(i, k)] - b[(j, k)];
            d * d
        })
        .sum()
}

/// Kernel matrix between the rows of `a` and the rows of `b`.
pub fn cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    check_bandwidth(sigma2)?;
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "row dimensions {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let scale = -1.0 / (2.0 * sigma2);
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        (scale * row_sq_dist(a, i, b, j)).exp()
    }))
}

/// Symmetric kernel matrix over the rows of `rows`: upper triangle computed
/// once and mirrored, diagonal exactly one.
pub fn kernel_matrix(rows: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    check_bandwidth(sigma2)?;
    let n = rows.nrows();
    let scale = -1.0 / (2.0 * sigma2);
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (scale * row_sq_dist(rows, i, rows, j)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Gram matrix of the Gaussian kernel over all band rows of `m`.
pub fn gram_matrix(m: &EndmemberMatrix, sigma2: f64) -> Result<GramMatrix> {
    let entries = kernel_matrix(m.matrix(), sigma2)?;
    Ok(GramMatrix { entries, sigma2 })
}

/// Re-targets a unit-bandwidth Gram matrix to bandwidth `sigma2` by raising
/// every entry to the power `1/sigma2`.
pub fn gram_power(k1: &GramMatrix, sigma2: f64) -> Result<GramMatrix> {
    check_bandwidth(sigma2)?;
    if k1.sigma2 != 1.0 {
        return Err(Error::Parameter(format!(
            "gram_power expects a unit-bandwidth Gram matrix, got sigma^2 = {}",
            k1.sigma2
        )));
    }
    let t = 1.0 / sigma2;
    let n = k1.len();
    let mut entries = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = k1.entries[(i, j)].powf(t);
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix { entries, sigma2 })
}

/// Largest absolute off-diagonal entry of `k`, optionally restricted to a
/// band subset. Sets with fewer than two distinct bands have coherence 0.
pub fn coherence(k: &GramMatrix, indices: Option<&[usize]>) -> Result<f64> {
    let set: Vec<usize> = match indices {
        None => (0..k.len()).collect(),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= k.len()) {
                return Err(Error::Input(format!(
                    "band index {bad} out of range for {} bands",
                    k.len()
                )));
            }
            let mut s = idx.to_vec();
            s.sort_unstable();
            s.dedup();
            s
        }
    };
    let mut mu = 0.0f64;
    for (a, &i) in set.iter().enumerate() {
        for &j in &set[a + 1..] {
            mu = mu.max(k.entries[(i, j)].abs());
        }
    }
    Ok(mu)
}
