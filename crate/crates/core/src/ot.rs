//! Domain-level alignment solver.
//!
//! Cost construction, log-domain Sinkhorn–Knopp scaling for the balanced
//! entropic problem, and the KL-relaxed (partial) variant in which mass may
//! be left unmatched on either side.
//!
//! Both modes minimise
//!
//! ```text
//! <γ, C> + ε Σ γ_ij (log γ_ij − 1) + τ (KL(γ1 ‖ a) + KL(γᵀ1 ‖ b))
//! ```
//!
//! where the KL terms are hard constraints in balanced mode. Potentials are
//! kept in log space and the plan is `γ_ij = exp((f_i + g_j − C_ij) / ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{HasdError, Result};
use crate::numerics::{dot, norm, Matrix};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    #[serde(rename = "cosine_distance")]
    Cosine,
    SquaredEuclidean,
}

impl std::str::FromStr for CostMetric {
    type Err = HasdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cosine_distance" => Ok(CostMetric::Cosine),
            "sqeuclidean" | "squared_euclidean" => Ok(CostMetric::SquaredEuclidean),
            other => Err(HasdError::arg(format!("unknown cost metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub matrix: Matrix,
    pub metric: CostMetric,
}

impl CostMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            matrix: self.matrix.transpose(),
            metric: self.metric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Balanced,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic weight ε.
    pub epsilon: f64,
    /// KL relaxation weight τ. Ignored in balanced mode.
    pub tau: f64,
    pub max_iters: usize,
    /// Stop threshold: marginal sup-norm (balanced) or potential change
    /// sup-norm (partial).
    pub tol: f64,
    pub mode: TransportMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tau: 0.0,
            max_iters: 5000,
            tol: 1e-8,
            mode: TransportMode::Balanced,
        }
    }
}

impl SinkhornConfig {
    pub fn balanced(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn partial(epsilon: f64, tau: f64) -> Self {
        Self {
            epsilon,
            tau,
            mode: TransportMode::Partial,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HasdError::arg(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(HasdError::arg(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.mode == TransportMode::Partial && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HasdError::arg(format!(
                "partial mode requires tau > 0, got {}",
                self.tau
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(HasdError::arg(format!(
                "tau must be >= 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Effective relaxation weight: zero in balanced mode.
    pub fn effective_tau(&self) -> f64 {
        match self.mode {
            TransportMode::Balanced => 0.0,
            TransportMode::Partial => self.tau,
        }
    }
}

/// Coupling returned by [`sinkhorn`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub gamma: Matrix,
    /// `γ 1`
    pub row_marginal: Vec<f64>,
    /// `γᵀ 1`
    pub col_marginal: Vec<f64>,
    /// `<γ, C>`
    pub transport_cost: f64,
    /// Unweighted `Σ γ (log γ − 1)`.
    pub entropy_term: f64,
    /// Unweighted `KL(γ1 ‖ a) + KL(γᵀ1 ‖ b)`; zero up to tolerance for
    /// converged balanced plans.
    pub partial_penalty: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Sup-norm of `γ1 − a` and `γᵀ1 − b`.
    pub marginal_violation: f64,
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
}

impl TransportPlan {
    pub fn transpose(&self) -> TransportPlan {
        TransportPlan {
            gamma: self.gamma.transpose(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
            row_potential: self.col_potential.clone(),
            col_potential: self.row_potential.clone(),
            ..self.clone()
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.row_marginal.iter().sum()
    }
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn cost_matrix(src: &Matrix, tgt: &Matrix, metric: CostMetric) -> Result<CostMatrix> {
    if src.cols() != tgt.cols() {
        return Err(HasdError::arg(format!(
            "cost_matrix feature dimension mismatch: {} vs {}",
            src.cols(),
            tgt.cols()
        )));
    }
    let matrix = match metric {
        CostMetric::SquaredEuclidean => Matrix::from_fn(src.rows(), tgt.rows(), |i, j| {
            src.row(i)
                .iter()
                .zip(tgt.row(j))
                .map(|(s, t)| (s - t) * (s - t))
                .sum()
        }),
        CostMetric::Cosine => {
            let src_norms = row_norms_checked(src, "source")?;
            let tgt_norms = row_norms_checked(tgt, "target")?;
            Matrix::from_fn(src.rows(), tgt.rows(), |i, j| {
                let cos = dot(src.row(i), tgt.row(j)) / (src_norms[i] * tgt_norms[j]);
                (1.0 - cos).clamp(0.0, 2.0)
            })
        }
    };
    Ok(CostMatrix { matrix, metric })
}

fn row_norms_checked(x: &Matrix, side: &str) -> Result<Vec<f64>> {
    x.row_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n > NORM_FLOOR {
                Ok(n)
            } else {
                Err(HasdError::arg(format!(
                    "cosine cost needs nonzero rows: {side} row {i} has norm {n:e}"
                )))
            }
        })
        .collect()
}

/// Gradient of `Σ_ij w_ij C(y_i, t_j)` with respect to every `y_i`.
pub fn weighted_cost_grad(
    y: &Matrix,
    tgt: &Matrix,
    weights: &Matrix,
    metric: CostMetric,
) -> Result<Matrix> {
    if weights.shape() != (y.rows(), tgt.rows()) || y.cols() != tgt.cols() {
        return Err(HasdError::arg(format!(
            "weighted_cost_grad shape mismatch: y {:?}, tgt {:?}, weights {:?}",
            y.shape(),
            tgt.shape(),
            weights.shape()
        )));
    }
    let dim = y.cols();
    let mut grad = Matrix::zeros(y.rows(), dim);
    match metric {
        CostMetric::SquaredEuclidean => {
            for i in 0..y.rows() {
                let yi = y.row(i);
                let wrow = weights.row(i);
                let mass: f64 = wrow.iter().sum();
                let g = grad.row_mut(i);
                // 2 Σ_j w_ij (y_i − t_j)
                for (gm, &ym) in g.iter_mut().zip(yi) {
                    *gm = 2.0 * mass * ym;
                }
                for (j, &w) in wrow.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (gm, &tm) in g.iter_mut().zip(tgt.row(j)) {
                        *gm -= 2.0 * w * tm;
                    }
                }
            }
        }
        CostMetric::Cosine => {
            let y_norms = row_norms_checked(y, "source")?;
            let t_norms = row_norms_checked(tgt, "target")?;
            for i in 0..y.rows() {
                let yi = y.row(i);
                let ny = y_norms[i];
                // d/dy [−y·t / (|y||t|)] = −t/(|y||t|) + (y·t) y / (|y|³ |t|)
                let mut acc_t = vec![0.0; dim];
                let mut acc_y = 0.0;
                for (j, &w) in weights.row(i).iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let tj = tgt.row(j);
                    let nt = t_norms[j];
                    let yt = dot(yi, tj);
                    for (a, &tm) in acc_t.iter_mut().zip(tj) {
                        *a += w * tm / (ny * nt);
                    }
                    acc_y += w * yt / (ny * ny * ny * nt);
                }
                let g = grad.row_mut(i);
                for ((gm, &a), &ym) in g.iter_mut().zip(&acc_t).zip(yi) {
                    *gm = -a + acc_y * ym;
                }
            }
        }
    }
    Ok(grad)
}

/// `Σ γ_ij (log γ_ij − 1)` with `0 log 0 = 0`.
pub fn entropy(gamma: &Matrix) -> Result<f64> {
    let mut acc = 0.0;
    for (idx, &v) in gamma.data().iter().enumerate() {
        if v < 0.0 {
            let c = gamma.cols().max(1);
            return Err(HasdError::arg(format!(
                "entropy of a negative entry at ({}, {})",
                idx / c,
                idx % c
            )));
        }
        if v > 0.0 {
            acc += v * (v.ln() - 1.0);
        }
    }
    Ok(acc)
}

/// Generalized KL divergence `Σ p log(p/q) − p + q` for unnormalized `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(HasdError::arg(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if !(qi > 0.0) {
            return Err(HasdError::arg(format!(
                "kl_divergence needs q > 0, q[{i}] = {qi}"
            )));
        }
        if pi < 0.0 {
            return Err(HasdError::arg(format!(
                "kl_divergence needs p >= 0, p[{i}] = {pi}"
            )));
        }
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
        acc += qi - pi;
    }
    Ok(acc)
}

/// Iteration cap of each intermediate stage of the ε ladder in [`sinkhorn`].
const STAGE_ITERS: usize = 200;
const STAGE_TOL: f64 = 1e-4;

/// Cold solve. Runs a halving ladder of entropic weights from the cost range
/// down to `cfg.epsilon`, each stage warm-started from the last; at small ε
/// plain scaling from zero potentials stalls long before reaching `tol`.
/// `iterations_used` counts every stage against `cfg.max_iters`.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let data = cost.matrix.data();
    let range = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - data.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut stages = Vec::new();
    let mut e = range;
    while e > cfg.epsilon && e.is_finite() {
        stages.push(e);
        e *= 0.5;
    }
    let mut used = 0;
    let mut plan: Option<TransportPlan> = None;
    for eps in stages {
        let budget = STAGE_ITERS.min(cfg.max_iters.saturating_sub(used + 1));
        if budget == 0 {
            break;
        }
        let stage = SinkhornConfig {
            epsilon: eps,
            max_iters: budget,
            tol: cfg.tol.max(STAGE_TOL),
            ..*cfg
        };
        let p = sinkhorn_warm(cost, a, b, &stage, plan.as_ref())?;
        used += p.iterations_used;
        plan = Some(p);
    }
    let last = SinkhornConfig {
        max_iters: cfg.max_iters.saturating_sub(used).max(1),
        ..*cfg
    };
    let mut out = sinkhorn_warm(cost, a, b, &last, plan.as_ref())?;
    out.iterations_used += used;
    Ok(out)
}

/// [`sinkhorn`] started from the potentials of a previous plan of the same
/// shape. Used by the adaptation loop, where consecutive cost matrices are
/// close.
pub fn sinkhorn_warm(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
    warm: Option<&TransportPlan>,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    check_marginal(a, n, "a")?;
    check_marginal(b, m, "b")?;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if cfg.mode == TransportMode::Balanced && (sa - sb).abs() > 1e-9 {
        return Err(HasdError::arg(format!(
            "balanced transport needs equal masses, got {sa} and {sb}"
        )));
    }

    let eps = cfg.epsilon;
    // damping exponent on each potential refresh; 1 recovers the balanced update
    let damp = match cfg.mode {
        TransportMode::Balanced => 1.0,
        TransportMode::Partial => cfg.tau / (cfg.tau + eps),
    };
    let c = cost.matrix.data();
    let ct = cost.matrix.transpose();
    let ct = ct.data();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();

    let (mut f, mut g) = match warm {
        Some(p) if p.row_potential.len() == n && p.col_potential.len() == m => {
            (p.row_potential.clone(), p.col_potential.clone())
        }
        _ => (vec![0.0; n], vec![0.0; m]),
    };
    let mut f_new = vec![0.0; n];
    let mut g_new = vec![0.0; m];

    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        refresh(&mut f_new, &g, c, m, &log_a, eps, damp);
        check_potentials(&f_new, a, it, "row")?;

        if cfg.mode == TransportMode::Balanced {
            // row marginal of the plan (f, g): a_i exp((f_i − f_new_i)/ε)
            let viol = f
                .iter()
                .zip(&f_new)
                .zip(a)
                .filter(|(_, &ai)| ai > 0.0)
                .map(|((&fo, &fnew), &ai)| (ai * ((fo - fnew) / eps).exp() - ai).abs())
                .fold(0.0, f64::max);
            if viol <= cfg.tol {
                converged = true;
                iterations = it;
                break;
            }
        }

        refresh(&mut g_new, &f_new, ct, n, &log_b, eps, damp);
        check_potentials(&g_new, b, it, "column")?;

        let change = if cfg.mode == TransportMode::Partial {
            sup_change(&f, &f_new).max(sup_change(&g, &g_new))
        } else {
            f64::INFINITY
        };
        std::mem::swap(&mut f, &mut f_new);
        std::mem::swap(&mut g, &mut g_new);
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }

    build_plan(cost, a, b, f, g, eps, iterations, converged)
}

const LSE_CUTOFF: f64 = 50.0;

/// `out_i = damp · (ε log w_i − ε LSE_j((other_j − K_ij)/ε))` for a
/// row-major kernel `k` with `stride` columns.
fn refresh(
    out: &mut [f64],
    other: &[f64],
    k: &[f64],
    stride: usize,
    log_w: &[f64],
    eps: f64,
    damp: f64,
) {
    let inv = 1.0 / eps;
    let mut buf = vec![0.0; stride];
    for (i, o) in out.iter_mut().enumerate() {
        if log_w[i] == f64::NEG_INFINITY {
            *o = f64::NEG_INFINITY;
            continue;
        }
        let row = &k[i * stride..(i + 1) * stride];
        let mut max = f64::NEG_INFINITY;
        for ((x, &h), &cij) in buf.iter_mut().zip(other).zip(row) {
            *x = h - cij;
            if *x > max {
                max = *x;
            }
        }
        let lse = if max.is_finite() {
            // terms below e^-50 of the largest cannot move the sum at f64
            // precision, so their exp is skipped
            let cut = max - LSE_CUTOFF * eps;
            let mut sum = 0.0;
            for &x in &buf {
                if x > cut {
                    sum += ((x - max) * inv).exp();
                }
            }
            max * inv + sum.ln()
        } else {
            max
        };
        *o = damp * (eps * log_w[i] - eps * lse);
    }
}

fn check_potentials(pot: &[f64], w: &[f64], iteration: usize, side: &str) -> Result<()> {
    for (i, (&p, &wi)) in pot.iter().zip(w).enumerate() {
        let ok = if wi > 0.0 { p.is_finite() } else { !p.is_nan() };
        if !ok {
            return Err(HasdError::numeric(
                iteration,
                format!("non-finite {side} potential at index {i}: {p}"),
            ));
        }
    }
    Ok(())
}

fn sup_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .filter(|(o, n)| o.is_finite() || n.is_finite())
        .map(|(o, n)| (o - n).abs())
        .fold(0.0, f64::max)
}

fn check_marginal(w: &[f64], n: usize, name: &str) -> Result<()> {
    if w.len() != n {
        return Err(HasdError::arg(format!(
            "marginal {name} has length {}, cost matrix needs {n}",
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(HasdError::arg(format!(
            "marginal {name}[{i}] = {} is not a finite nonnegative weight",
            w[i]
        )));
    }
    if !(w.iter().sum::<f64>() > 0.0) {
        return Err(HasdError::arg(format!(
            "marginal {name} has zero total mass"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_plan(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    f: Vec<f64>,
    g: Vec<f64>,
    eps: f64,
    iterations: usize,
    converged: bool,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    let c = &cost.matrix;
    let gamma = Matrix::from_fn(n, m, |i, j| ((f[i] + g[j] - c[(i, j)]) / eps).exp());
    if !gamma.is_finite() {
        return Err(HasdError::numeric(iterations, "transport plan overflowed"));
    }
    let row_marginal = gamma.row_sums();
    let col_marginal = gamma.col_sums();
    let transport_cost = frobenius_inner(&gamma, c);
    let entropy_term = entropy(&gamma)?;
    let partial_penalty = kl_or_zero(&row_marginal, a) + kl_or_zero(&col_marginal, b);
    let marginal_violation = sup_change(&row_marginal, a).max(sup_change(&col_marginal, b));
    Ok(TransportPlan {
        gamma,
        row_marginal,
        col_marginal,
        transport_cost,
        entropy_term,
        partial_penalty,
        iterations_used: iterations,
        converged,
        marginal_violation,
        row_potential: f,
        col_potential: g,
    })
}

// KL with the convention that zero-weight entries carrying zero mass add nothing.
fn kl_or_zero(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if qi > 0.0 {
                let t = if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 };
                t - pi + qi
            } else if pi == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `<γ, C> + ε H(γ) + τ (KL(γ1 ‖ a) + KL(γᵀ1 ‖ b))`; the τ term is zero in
/// balanced mode.
pub fn das_loss(
    plan: &TransportPlan,
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<f64> {
    Ok(das_terms(&plan.gamma, cost, a, b, cfg)?.total())
}

/// The three DAS constituents, already weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DasTerms {
    pub transport: f64,
    pub entropic: f64,
    pub relaxation: f64,
}

impl DasTerms {
    pub fn total(&self) -> f64 {
        self.transport + self.entropic + self.relaxation
    }
}

pub fn das_terms(
    gamma: &Matrix,
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<DasTerms> {
    if gamma.shape() != cost.shape() || a.len() != gamma.rows() || b.len() != gamma.cols() {
        return Err(HasdError::arg(format!(
            "das_loss shape mismatch: plan {:?}, cost {:?}, |a| = {}, |b| = {}",
            gamma.shape(),
            cost.shape(),
            a.len(),
            b.len()
        )));
    }
    let transport = frobenius_inner(gamma, &cost.matrix);
    let entropic = cfg.epsilon * entropy(gamma)?;
    let relaxation = match cfg.mode {
        TransportMode::Balanced => 0.0,
        TransportMode::Partial => {
            cfg.tau * (kl_divergence(&gamma.row_sums(), a)? + kl_divergence(&gamma.col_sums(), b)?)
        }
    };
    Ok(DasTerms {
        transport,
        entropic,
        relaxation,
    })
}
