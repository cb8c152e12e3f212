//! Hierarchical adaptation: a residual affine map `T(r) = r + W r + b`
//! trained to carry source prototypes onto the target prototype cloud.
//!
//! The objective has three parts:
//!
//! * domain level: the entropic (optionally KL-relaxed) transport objective
//!   between `T(source)` and `target` for the current plan `γ`;
//! * slide level: `Σ_n ‖G(B_n) − G(T(B_n))‖_F` with `G(X) = X Xᵀ`, which
//!   keeps each slide's internal geometry;
//! * patch level: `Σ_n Σ_p (Atten(T(r_np)) − Atten(r_np))²` with attention
//!   taken over the slide's own prototypes, which keeps the source model's
//!   attention pattern.
//!
//! Optimisation alternates between re-solving the plan on the current
//! `T(source)` and gradient steps on `(W, b)` with the plan held fixed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{HasdError, Result};
use crate::mil::{self, MilModel, SlideBag};
use crate::numerics::{dot, frobenius_distance, gram, softmax, Matrix};
use crate::ot::{
    cost_matrix, das_terms, sinkhorn_warm, uniform_marginal, weighted_cost_grad, CostMatrix,
    CostMetric, SinkhornConfig, TransportPlan,
};
use crate::proto::{block_ranges, PrototypeDomain};

/// `T(r) = r + W r + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl TransportMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            w: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.bias.len();
        if self.w.shape() != (m, m) {
            return Err(HasdError::arg(format!(
                "transport map W is {:?}, bias has length {m}",
                self.w.shape()
            )));
        }
        if !self.w.is_finite() || self.bias.iter().any(|v| !v.is_finite()) {
            return Err(HasdError::arg("transport map has non-finite parameters"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.w.data().iter().all(|&v| v == 0.0) && self.bias.iter().all(|&v| v == 0.0)
    }

    pub fn n_params(&self) -> usize {
        self.w.data().len() + self.bias.len()
    }

    /// `W` row-major, then `bias`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.w.data().to_vec();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let nw = self.w.data().len();
        self.w.data_mut().copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
    }

    /// `(I + W)⁻¹ (y − b)` for every row: pulls target-side features back.
    pub fn invert_rows(&self, y: &Matrix) -> Result<Matrix> {
        let m = self.dim();
        let mut lhs = self.w.clone();
        for i in 0..m {
            lhs[(i, i)] += 1.0;
        }
        let mut shifted = y.clone();
        for i in 0..shifted.rows() {
            for (v, b) in shifted.row_mut(i).iter_mut().zip(&self.bias) {
                *v -= b;
            }
        }
        Ok(crate::numerics::solve(&lhs, &shifted.transpose())?.transpose())
    }
}

/// Applies `T` row by row.
pub fn apply_map(map: &TransportMap, x: &Matrix) -> Result<Matrix> {
    if x.cols() != map.dim() {
        return Err(HasdError::arg(format!(
            "apply_map: features have dimension {}, map has {}",
            x.cols(),
            map.dim()
        )));
    }
    let mut out = x.matmul_t(&map.w)?;
    for (i, r) in x.row_iter().enumerate() {
        for ((o, &xv), &b) in out.row_mut(i).iter_mut().zip(r).zip(&map.bias) {
            *o += xv + b;
        }
    }
    Ok(out)
}

/// Stacked prototypes of one domain with their slide membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub matrix: Matrix,
    pub slide_index: Vec<usize>,
}

impl Prototypes {
    pub fn new(matrix: Matrix, slide_index: Vec<usize>) -> Result<Self> {
        if slide_index.len() != matrix.rows() {
            return Err(HasdError::arg(format!(
                "{} slide indices for {} prototype rows",
                slide_index.len(),
                matrix.rows()
            )));
        }
        if slide_index.windows(2).any(|w| w[1] < w[0]) {
            return Err(HasdError::arg("prototype rows must be grouped by slide"));
        }
        Ok(Self {
            matrix,
            slide_index,
        })
    }

    /// One block per row, for a domain that has no slide structure.
    pub fn ungrouped(matrix: Matrix) -> Self {
        let slide_index = (0..matrix.rows()).collect();
        Self {
            matrix,
            slide_index,
        }
    }

    pub fn blocks(&self) -> Vec<Range<usize>> {
        block_ranges(&self.slide_index)
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

impl From<PrototypeDomain> for Prototypes {
    fn from(d: PrototypeDomain) -> Self {
        Self {
            matrix: d.matrix,
            slide_index: d.slide_index,
        }
    }
}

pub fn sgir_loss(map: &TransportMap, src: &Prototypes) -> Result<f64> {
    let mapped = apply_map(map, &src.matrix)?;
    let mut total = 0.0;
    for block in src.blocks() {
        let before = gram(&src.matrix.row_block(block.start, block.end));
        let after = gram(&mapped.row_block(block.start, block.end));
        total += frobenius_distance(&before, &after)?;
    }
    Ok(total)
}

/// Gradient of [`sgir_loss`] with respect to the mapped rows `T(src)`.
/// Blocks whose Gram matrix is unchanged contribute zero (the norm is not
/// differentiable there).
fn sgir_grad_mapped(src: &Prototypes, mapped: &Matrix) -> Matrix {
    let mut grad = Matrix::zeros(mapped.rows(), mapped.cols());
    for block in src.blocks() {
        let b = src.matrix.row_block(block.start, block.end);
        let y = mapped.row_block(block.start, block.end);
        let g0 = gram(&b);
        let g1 = gram(&y);
        let diff = Matrix::from_fn(g1.rows(), g1.cols(), |i, j| g1[(i, j)] - g0[(i, j)]);
        let norm = diff.frobenius_norm();
        if norm == 0.0 {
            continue;
        }
        // d‖D‖/dY = 2 D Y / ‖D‖ for symmetric D = YYᵀ − BBᵀ
        let dy = diff.matmul(&y).expect("block shapes agree");
        for (local, row) in (block.start..block.end).enumerate() {
            for (g, &v) in grad.row_mut(row).iter_mut().zip(dy.row(local)) {
                *g = 2.0 * v / norm;
            }
        }
    }
    grad
}

pub fn pacr_loss(map: &TransportMap, model: &MilModel, src: &Prototypes) -> Result<f64> {
    let mapped = apply_map(map, &src.matrix)?;
    let mut total = 0.0;
    for block in src.blocks() {
        let before = mil::attention_scores(model, &src.matrix.row_block(block.start, block.end))?;
        let after = mil::attention_scores(model, &mapped.row_block(block.start, block.end))?;
        total += before
            .iter()
            .zip(&after)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>();
    }
    Ok(total)
}

fn pacr_grad_mapped(model: &MilModel, src: &Prototypes, mapped: &Matrix) -> Result<Matrix> {
    let mut grad = Matrix::zeros(mapped.rows(), mapped.cols());
    let l = model.hidden();
    for block in src.blocks() {
        let reference =
            mil::attention_scores(model, &src.matrix.row_block(block.start, block.end))?;
        let y = mapped.row_block(block.start, block.end);
        let hidden: Vec<Vec<f64>> = y
            .row_iter()
            .map(|r| (0..l).map(|k| dot(model.v.row(k), r).tanh()).collect())
            .collect();
        let logits: Vec<f64> = hidden.iter().map(|h| dot(&model.w, h)).collect();
        let a = softmax(&logits);
        let da: Vec<f64> = a
            .iter()
            .zip(&reference)
            .map(|(x, r)| 2.0 * (x - r))
            .collect();
        let mean_da = dot(&a, &da);
        for (local, row) in (block.start..block.end).enumerate() {
            let ds = a[local] * (da[local] - mean_da);
            if ds == 0.0 {
                continue;
            }
            let h = &hidden[local];
            let g = grad.row_mut(row);
            for k in 0..l {
                let dh = ds * model.w[k] * (1.0 - h[k] * h[k]);
                for (gm, &vm) in g.iter_mut().zip(model.v.row(k)) {
                    *gm += dh * vm;
                }
            }
        }
    }
    Ok(grad)
}

/// Chains a gradient with respect to `T(X)` back to `(W, b)`.
fn chain_to_params(x: &Matrix, grad_mapped: &Matrix) -> Vec<f64> {
    let m = x.cols();
    let mut gw = Matrix::zeros(m, m);
    let mut gb = vec![0.0; m];
    for (g, r) in grad_mapped.row_iter().zip(x.row_iter()) {
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            gb[i] += gi;
            for (w, &rv) in gw.row_mut(i).iter_mut().zip(r) {
                *w += gi * rv;
            }
        }
    }
    let mut out = gw.into_data();
    out.extend_from_slice(&gb);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Slide-level geometry weight λ1.
    pub lambda1: f64,
    /// Patch-level attention weight λ2.
    pub lambda2: f64,
    pub sinkhorn: SinkhornConfig,
    pub metric: CostMetric,
    pub steps: usize,
    pub step_size: f64,
    /// The step size is multiplied by `decay_factor` every `decay_every` steps.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub replan_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-8,
            lambda2: 1e-2,
            // warm-started from the previous step's potentials, so a few
            // sweeps per step keep the plan on track
            sinkhorn: SinkhornConfig {
                max_iters: 10,
                ..SinkhornConfig::default()
            },
            metric: CostMetric::Cosine,
            steps: 300,
            step_size: 0.2,
            decay_every: 100,
            decay_factor: 0.5,
            replan_every: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda1) || !finite_nonneg(self.lambda2) {
            return Err(HasdError::arg(format!(
                "lambda1 and lambda2 must be finite and >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(HasdError::arg(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.replan_every == 0 || self.decay_every == 0 {
            return Err(HasdError::arg("replan_every and decay_every must be >= 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(HasdError::arg("decay factor must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn step_size_at(&self, step: usize) -> f64 {
        self.step_size * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

/// Objective value split into its weighted contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `<γ,C> + ε H(γ) + τ R(γ)`.
    pub das: f64,
    /// `λ1 · L_SGIR`.
    pub sgir: f64,
    /// `λ2 · L_PACR`.
    pub pacr: f64,
}

fn check_inputs(
    map: &TransportMap,
    src: &Prototypes,
    tgt: &Prototypes,
    model: &MilModel,
) -> Result<()> {
    map.validate()?;
    let m = map.dim();
    if src.dim() != m || tgt.dim() != m || model.dim() != m {
        return Err(HasdError::arg(format!(
            "dimension mismatch: map {m}, source {}, target {}, model {}",
            src.dim(),
            tgt.dim(),
            model.dim()
        )));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(HasdError::arg("adaptation needs non-empty prototype sets"));
    }
    Ok(())
}

fn mapped_cost(
    map: &TransportMap,
    src: &Prototypes,
    tgt: &Prototypes,
    metric: CostMetric,
) -> Result<(Matrix, CostMatrix)> {
    let mapped = apply_map(map, &src.matrix)?;
    let cost = cost_matrix(&mapped, &tgt.matrix, metric)?;
    Ok((mapped, cost))
}

/// `L_DAS(plan) + λ1 L_SGIR + λ2 L_PACR` at the current map, with costs
/// recomputed from `T(src)`.
pub fn total_loss(
    map: &TransportMap,
    plan: &TransportPlan,
    src: &Prototypes,
    tgt: &Prototypes,
    model: &MilModel,
    cfg: &AdaptConfig,
) -> Result<LossBreakdown> {
    check_inputs(map, src, tgt, model)?;
    let (_, cost) = mapped_cost(map, src, tgt, cfg.metric)?;
    let a = uniform_marginal(src.len());
    let b = uniform_marginal(tgt.len());
    let das = das_terms(&plan.gamma, &cost, &a, &b, &cfg.sinkhorn)?.total();
    let sgir = if cfg.lambda1 != 0.0 {
        cfg.lambda1 * sgir_loss(map, src)?
    } else {
        0.0
    };
    let pacr = if cfg.lambda2 != 0.0 {
        cfg.lambda2 * pacr_loss(map, model, src)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: das + sgir + pacr,
        das,
        sgir,
        pacr,
    })
}

/// Gradient of [`total_loss`] in [`TransportMap::to_params`] order, with the
/// plan held constant.
pub fn total_loss_grad(
    map: &TransportMap,
    plan: &TransportPlan,
    src: &Prototypes,
    tgt: &Prototypes,
    model: &MilModel,
    cfg: &AdaptConfig,
) -> Result<Vec<f64>> {
    check_inputs(map, src, tgt, model)?;
    if plan.gamma.shape() != (src.len(), tgt.len()) {
        return Err(HasdError::arg(format!(
            "plan shape {:?} does not match {} source and {} target prototypes",
            plan.gamma.shape(),
            src.len(),
            tgt.len()
        )));
    }
    let mapped = apply_map(map, &src.matrix)?;
    let mut grad_mapped = weighted_cost_grad(&mapped, &tgt.matrix, &plan.gamma, cfg.metric)?;
    if cfg.lambda1 != 0.0 {
        let g = sgir_grad_mapped(src, &mapped);
        for (t, v) in grad_mapped.data_mut().iter_mut().zip(g.data()) {
            *t += cfg.lambda1 * v;
        }
    }
    if cfg.lambda2 != 0.0 {
        let g = pacr_grad_mapped(model, src, &mapped)?;
        for (t, v) in grad_mapped.data_mut().iter_mut().zip(g.data()) {
            *t += cfg.lambda2 * v;
        }
    }
    Ok(chain_to_params(&src.matrix, &grad_mapped))
}

/// Gradient of the unweighted [`sgir_loss`] in parameter order.
pub fn sgir_grad(map: &TransportMap, src: &Prototypes) -> Result<Vec<f64>> {
    let mapped = apply_map(map, &src.matrix)?;
    Ok(chain_to_params(
        &src.matrix,
        &sgir_grad_mapped(src, &mapped),
    ))
}

/// Gradient of the unweighted [`pacr_loss`] in parameter order.
pub fn pacr_grad(map: &TransportMap, model: &MilModel, src: &Prototypes) -> Result<Vec<f64>> {
    let mapped = apply_map(map, &src.matrix)?;
    Ok(chain_to_params(
        &src.matrix,
        &pacr_grad_mapped(model, src, &mapped)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub das: f64,
    pub sgir: f64,
    pub pacr: f64,
    pub replanned: bool,
    pub plan_converged: bool,
    pub plan_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub records: Vec<StepRecord>,
    pub map: TransportMap,
    /// Plan solved on the final map; absent when no steps were taken.
    pub final_plan: Option<TransportPlan>,
}

/// Learns `T` by alternating plan solves and plan-fixed gradient steps,
/// starting from the identity map.
pub fn fit(
    src: &Prototypes,
    tgt: &Prototypes,
    model: &MilModel,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let mut map = TransportMap::identity(src.dim());
    check_inputs(&map, src, tgt, model)?;
    let a = uniform_marginal(src.len());
    let b = uniform_marginal(tgt.len());
    let mut params = map.to_params();
    let mut plan: Option<TransportPlan> = None;
    let mut records = Vec::with_capacity(cfg.steps);

    let solve = |map: &TransportMap, warm: Option<&TransportPlan>, step: usize| {
        let (_, cost) = mapped_cost(map, src, tgt, cfg.metric)?;
        sinkhorn_warm(&cost, &a, &b, &cfg.sinkhorn, warm).map_err(|e| match e {
            HasdError::Numeric { message, .. } => HasdError::numeric(
                step,
                format!("transport solve failed at adaptation step {step}: {message}"),
            ),
            other => other,
        })
    };

    for step in 0..cfg.steps {
        let replanned = step % cfg.replan_every == 0;
        if replanned {
            plan = Some(solve(&map, plan.as_ref(), step)?);
        }
        let current = plan.as_ref().expect("plan solved on step 0");
        let loss = total_loss(&map, current, src, tgt, model, cfg)?;
        if !loss.total.is_finite() {
            return Err(HasdError::numeric(step, "non-finite adaptation loss"));
        }
        records.push(StepRecord {
            step,
            total: loss.total,
            das: loss.das,
            sgir: loss.sgir,
            pacr: loss.pacr,
            replanned,
            plan_converged: current.converged,
            plan_iterations: current.iterations_used,
        });
        let grad = total_loss_grad(&map, current, src, tgt, model, cfg)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(HasdError::numeric(
                step,
                "non-finite gradient of the transport map",
            ));
        }
        let lr = cfg.step_size_at(step);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        map.set_params(&params);
    }

    let final_plan = if cfg.steps > 0 {
        Some(solve(&map, plan.as_ref(), cfg.steps)?)
    } else {
        None
    };
    Ok(AdaptReport {
        records,
        map,
        final_plan,
    })
}

/// Source prototype bags pushed through `T`, one bag per slide, carrying the
/// source labels.
pub fn mapped_bags(
    map: &TransportMap,
    src: &Prototypes,
    labels: &[Option<bool>],
    ids: &[String],
) -> Result<Vec<SlideBag>> {
    let mapped = apply_map(map, &src.matrix)?;
    let blocks = src.blocks();
    if blocks.len() != labels.len() || blocks.len() != ids.len() {
        return Err(HasdError::arg(format!(
            "{} prototype blocks but {} labels and {} slide ids",
            blocks.len(),
            labels.len(),
            ids.len()
        )));
    }
    blocks
        .into_iter()
        .zip(labels)
        .zip(ids)
        .map(|((r, &label), id)| SlideBag::new(id.clone(), mapped.row_block(r.start, r.end), label))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadRefitConfig {
    pub epochs: usize,
    pub step_size: f64,
}

impl Default for HeadRefitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            step_size: 1e-1,
        }
    }
}

/// Refits the classifier head on `T(source prototypes)` with source labels,
/// attention frozen.
pub fn refit_head_on_map(
    model: &MilModel,
    map: &TransportMap,
    src: &Prototypes,
    labels: &[Option<bool>],
    ids: &[String],
    cfg: &HeadRefitConfig,
) -> Result<MilModel> {
    let bags = mapped_bags(map, src, labels, ids)?;
    Ok(mil::refit_head(model, &bags, cfg.epochs, cfg.step_size)?.model)
}
