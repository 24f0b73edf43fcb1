//! LDA diagnostics on a latent space: within/between scatter matrices, a
//! trace-form Fisher score, a cyclic Jacobi eigensolver and the LDA
//! projection obtained by whitening.

use crate::autodiff::Tensor;
use crate::error::{NdaError, Result};
use crate::losses::ClassMeans;

pub const DEFAULT_RIDGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterStats {
    /// `S_W = (1/N) Σ_j Σ_{i: y_i = j} (x_i − μ_j)(x_i − μ_j)ᵀ`
    pub s_within: Tensor,
    /// `S_B = (1/N) Σ_j N_j (μ_j − μ)(μ_j − μ)ᵀ`
    pub s_between: Tensor,
    pub means: ClassMeans,
    /// [`fisher_score`] at [`DEFAULT_RIDGE`]
    pub fisher_score: f64,
    /// fewer than two classes present: `S_B` is identically zero
    pub single_class: bool,
}

impl ScatterStats {
    pub fn dim(&self) -> usize {
        self.s_within.rows()
    }
}

fn add_outer(acc: &mut Tensor, v: &[f64], weight: f64) {
    let d = v.len();
    for i in 0..d {
        let wi = weight * v[i];
        let row = acc.row_mut(i);
        for j in 0..d {
            row[j] += wi * v[j];
        }
    }
}

/// Within- and between-class scatter of `latents` (one row per sample).
/// Classes with no samples are ignored.
pub fn scatter_matrices(latents: &Tensor, labels: &[usize]) -> Result<ScatterStats> {
    if latents.shape().len() != 2 || latents.rows() != labels.len() || labels.is_empty() {
        return Err(NdaError::Shape {
            op: "scatter_matrices",
            left: latents.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let means = ClassMeans::from_latents(latents, labels, k, 0)?;
    let d = latents.cols();
    let n = labels.len() as f64;

    let mut s_within = Tensor::zeros(vec![d, d]);
    let mut centered = vec![0.0; d];
    for (r, &l) in labels.iter().enumerate() {
        for ((c, x), m) in centered.iter_mut().zip(latents.row(r)).zip(means.mean(l)) {
            *c = x - m;
        }
        add_outer(&mut s_within, &centered, 1.0 / n);
    }

    let mut s_between = Tensor::zeros(vec![d, d]);
    for j in 0..k {
        if !means.is_present(j) {
            continue;
        }
        for ((c, m), g) in centered
            .iter_mut()
            .zip(means.mean(j))
            .zip(&means.global_mean)
        {
            *c = m - g;
        }
        add_outer(&mut s_between, &centered, means.counts[j] as f64 / n);
    }
    let present = means.counts.iter().filter(|&&c| c > 0).count();
    let mut stats = ScatterStats {
        s_within,
        s_between,
        single_class: present < 2,
        means,
        fisher_score: 0.0,
    };
    stats.fisher_score = fisher_score(&stats, DEFAULT_RIDGE)?;
    Ok(stats)
}

fn check_square_symmetric(a: &Tensor) -> Result<usize> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(NdaError::Shape {
            op: "eigen",
            left: a.shape().to_vec(),
            right: vec![],
        });
    }
    let n = a.rows();
    for i in 0..n {
        for j in i + 1..n {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(NdaError::contract(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }
    if !a.is_finite() {
        return Err(NdaError::NonFinite { op: "eigen" });
    }
    Ok(n)
}

fn frobenius(a: &Tensor) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn off_diagonal_norm(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenResult {
    /// descending
    pub values: Vec<f64>,
    /// eigenvectors as orthonormal columns, aligned with `values`
    pub vectors: Tensor,
    pub sweeps: usize,
}

impl EigenResult {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.rows())
            .map(|i| self.vectors.get(i, k))
            .collect()
    }
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm is at most
/// `tol`.
pub fn jacobi_eigen_symmetric(matrix: &Tensor, max_sweeps: usize, tol: f64) -> Result<EigenResult> {
    let n = check_square_symmetric(matrix)?;
    let mut a = matrix.clone();
    // exact symmetry from here on
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    let mut v = Tensor::identity(n);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps == max_sweeps {
            return Err(NdaError::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Tensor::zeros(vec![n, n]);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    Ok(EigenResult {
        values,
        vectors,
        sweeps,
    })
}

/// Jacobi with a tolerance relative to the matrix norm.
pub fn eigen_symmetric(matrix: &Tensor) -> Result<EigenResult> {
    let tol = 1e-14 * frobenius(matrix);
    jacobi_eigen_symmetric(matrix, 100, tol)
}

fn ridged(s: &Tensor, ridge: f64) -> Tensor {
    let mut out = s.clone();
    for i in 0..out.rows() {
        let v = out.get(i, i);
        out.set(i, i, v + ridge);
    }
    out
}

/// `trace((S_W + ridge·I)⁻¹ S_B)`; larger means more discriminative.
pub fn fisher_score(stats: &ScatterStats, ridge: f64) -> Result<f64> {
    if !(ridge > 0.0) {
        return Err(NdaError::contract(format!(
            "ridge must be positive, got {ridge}"
        )));
    }
    let eig = eigen_symmetric(&ridged(&stats.s_within, ridge))?;
    let d = stats.dim();
    let mut score = 0.0;
    for k in 0..d {
        let v = eig.vector(k);
        let mut quad = 0.0;
        for i in 0..d {
            let row = stats.s_between.row(i);
            quad += v[i] * row.iter().zip(&v).map(|(b, x)| b * x).sum::<f64>();
        }
        score += quad / eig.values[k];
    }
    if !score.is_finite() {
        return Err(NdaError::NonFinite { op: "fisher_score" });
    }
    Ok(score.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaProjection {
    /// `d × target_dim`, unit-norm columns
    pub matrix: Tensor,
    /// generalized eigenvalues, descending
    pub eigenvalues: Vec<f64>,
    /// every eigenvalue is (numerically) zero: no discriminative direction
    pub degenerate: bool,
    /// `target_dim` exceeded `min(d, K − 1)`
    pub rank_exceeded: bool,
}

/// Top generalized eigenvectors of `(S_W + ridge·I, S_B)` via whitening:
/// `W = V Λ^{-1/2}` from `S_W + ridge·I`, then the eigenvectors `Q` of
/// `Wᵀ S_B W` give `U = W Q`.
pub fn lda_projection(
    stats: &ScatterStats,
    target_dim: usize,
    ridge: f64,
) -> Result<LdaProjection> {
    let d = stats.dim();
    if target_dim == 0 || target_dim > d {
        return Err(NdaError::contract(format!(
            "target dimension must lie in [1, {d}], got {target_dim}"
        )));
    }
    if !(ridge > 0.0) {
        return Err(NdaError::contract(format!(
            "ridge must be positive, got {ridge}"
        )));
    }
    let classes = stats.means.counts.iter().filter(|&&c| c > 0).count();
    let rank_exceeded = target_dim > d.min(classes.saturating_sub(1));

    let within = eigen_symmetric(&ridged(&stats.s_within, ridge))?;
    let mut whiten = within.vectors.clone();
    for k in 0..d {
        let scale = 1.0 / within.values[k].sqrt();
        for r in 0..d {
            let v = whiten.get(r, k);
            whiten.set(r, k, v * scale);
        }
    }
    let mut m = whiten
        .transpose()
        .matmul(&stats.s_between)?
        .matmul(&whiten)?;
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    let between = eigen_symmetric(&m)?;
    let full = whiten.matmul(&between.vectors)?;
    let mut matrix = Tensor::zeros(vec![d, target_dim]);
    for k in 0..target_dim {
        let norm = (0..d).map(|r| full.get(r, k).powi(2)).sum::<f64>().sqrt();
        for r in 0..d {
            matrix.set(r, k, full.get(r, k) / norm);
        }
    }
    let top = between.values.first().copied().unwrap_or(0.0);
    Ok(LdaProjection {
        matrix,
        degenerate: top.abs() <= 1e-12,
        eigenvalues: between.values,
        rank_exceeded,
    })
}

/// Per-epoch discriminance summary of a latent space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentDiagnostics {
    pub fisher_score: f64,
    /// mean Euclidean distance of a sample to its class centroid
    pub intra_distance: f64,
    /// mean Euclidean distance between pairs of class centroids
    pub inter_distance: f64,
}

pub fn latent_diagnostics(
    latents: &Tensor,
    labels: &[usize],
    ridge: f64,
) -> Result<LatentDiagnostics> {
    let stats = scatter_matrices(latents, labels)?;
    let fisher = if ridge == DEFAULT_RIDGE {
        stats.fisher_score
    } else {
        fisher_score(&stats, ridge)?
    };
    let means = &stats.means;
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let intra = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| dist(latents.row(r), means.mean(l)))
        .sum::<f64>()
        / labels.len() as f64;
    let present: Vec<usize> = (0..means.num_classes())
        .filter(|&j| means.is_present(j))
        .collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in present.iter().enumerate() {
        for &j in &present[a + 1..] {
            inter += dist(means.mean(i), means.mean(j));
            pairs += 1;
        }
    }
    Ok(LatentDiagnostics {
        fisher_score: fisher,
        intra_distance: intra,
        inter_distance: if pairs > 0 { inter / pairs as f64 } else { 0.0 },
    })
}
