//! Pixel-space distribution metrics: Gaussian Fréchet distance, sliced
//! Wasserstein-2 and mean pairwise distance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `n` flattened samples of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != n * dim {
            return Err(Error::shape("SampleSet::new", format!("{n}x{dim}"), data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sample set".into()));
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::invalid("samples of unequal dimension"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn project(&self, dir: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Mean vector and covariance matrix (row-major, `dim × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::shape("GaussianSummary", d * d, cov.len()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-10 {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(s: &SampleSet) -> Result<GaussianSummary> {
    if s.n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {}", s.n)));
    }
    let d = s.dim;
    let mut mean = vec![0.0; d];
    for i in 0..s.n {
        for (m, v) in mean.iter_mut().zip(s.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s.n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..s.n {
        for (c, (v, m)) in centered.iter_mut().zip(s.row(i).iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (s.n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianSummary { mean, cov })
}

fn clamped_eigenvalues(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::NonFinite(format!(
                "covariance has eigenvalue {v}, not positive semidefinite"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, using
/// `tr (Σ_a Σ_b)^{1/2} = tr (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape("frechet_distance", d, b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let eig = clamped_eigenvalues(&sa)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let sqrt_a = &eig.eigenvectors * root * eig.eigenvectors.transpose();
    let inner = &sqrt_a * sb * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = clamped_eigenvalues(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = mean_term + sa.trace() + inner_trace(&b.cov, d) - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn inner_trace(cov: &[f64], d: usize) -> f64 {
    (0..d).map(|i| cov[i * d + i]).sum()
}

/// Uniformly random unit directions.
pub fn random_projections(dim: usize, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v = rng.normals(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Exact squared W2 between two sorted empirical 1-D distributions with
/// uniform weights. Point masses are counted in integer units (`m` per
/// `a`-point, `n` per `b`-point) so the quantile coupling is exact.
pub fn w2_squared_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (m as u64, n as u64);
    let mut acc = 0.0;
    while i < n && j < m {
        let w = ra.min(rb);
        acc += w as f64 * (a[i] - b[j]) * (a[i] - b[j]);
        ra -= w;
        rb -= w;
        if ra == 0 {
            i += 1;
            ra = m as u64;
        }
        if rb == 0 {
            j += 1;
            rb = n as u64;
        }
    }
    acc / (n as f64 * m as f64)
}

/// Sliced W2 over the given unit directions: root-mean of the per-direction
/// squared 1-D distances.
pub fn sliced_wasserstein2_with(a: &SampleSet, b: &SampleSet, projections: &[Vec<f64>]) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("sliced_wasserstein2", a.dim, b.dim));
    }
    if a.is_empty() || b.is_empty() || projections.is_empty() {
        return Err(Error::invalid("sliced_wasserstein2 needs samples and projections"));
    }
    let mut total = 0.0;
    for dir in projections {
        let mut pa = a.project(dir);
        let mut pb = b.project(dir);
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += w2_squared_sorted(&pa, &pb);
    }
    Ok((total / projections.len() as f64).sqrt())
}

pub fn sliced_wasserstein2(a: &SampleSet, b: &SampleSet, n_projections: usize, rng: &mut RngStream) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("sliced_wasserstein2", a.dim, b.dim));
    }
    let dirs = random_projections(a.dim, n_projections, rng);
    sliced_wasserstein2_with(a, b, &dirs)
}

/// Mean L2 distance over all unordered pairs.
pub fn pairwise_diversity(s: &SampleSet) -> Result<f64> {
    if s.n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {}", s.n)));
    }
    let mut total = 0.0;
    for i in 0..s.n {
        for j in i + 1..s.n {
            total += s
                .row(i)
                .iter()
                .zip(s.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (s.n * (s.n - 1) / 2) as f64)
}
