//! AUROC, alignment diagnostics and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::adapt::{apply_map, pacr_loss, sgir_loss, Prototypes, TransportMap};
use crate::error::{HasdError, Result};
use crate::mil::{self, MilModel, SlideBag};
use crate::ot::{cost_matrix, frobenius_inner, CostMetric, TransportPlan};

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted as
/// one half through midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HasdError::arg(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(HasdError::arg(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HasdError::arg(format!(
            "auroc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Sum of positive ranks, doubled so that midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, midrank doubled = start + 1 + end
        let mid2 = (start + 1 + end) as u128;
        let pos_in_tie = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        rank_sum2 += mid2 * pos_in_tie;
        start = end;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R_pos − p(p+1)/2, computed as 2U to keep exact integers
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `<γ, C(T(src), tgt)>` divided by the plan's total mass.
    pub mean_transport_cost: f64,
    /// Sup-norm of the plan's marginal residuals against the uniform weights.
    pub marginal_violation: f64,
    /// SGIR penalty divided by the number of source slides.
    pub mean_gram_distortion: f64,
    /// PACR penalty divided by the number of source slides.
    pub mean_attention_divergence: f64,
}

/// Per-field definitions are documented on [`Alignment`]. The plan must have
/// been solved between `apply_map(T, src)` and `tgt`.
pub fn alignment_diagnostics(
    map: &TransportMap,
    plan: &TransportPlan,
    src: &Prototypes,
    tgt: &Prototypes,
    model: &MilModel,
    metric: CostMetric,
) -> Result<Alignment> {
    let mapped = apply_map(map, &src.matrix)?;
    let cost = cost_matrix(&mapped, &tgt.matrix, metric)?;
    if plan.gamma.shape() != cost.shape() {
        return Err(HasdError::arg(format!(
            "plan is {:?} but prototypes give a {:?} cost",
            plan.gamma.shape(),
            cost.shape()
        )));
    }
    let mass = plan.total_mass();
    let mean_transport_cost = if mass > 0.0 {
        frobenius_inner(&plan.gamma, &cost.matrix) / mass
    } else {
        0.0
    };
    let a = 1.0 / src.len() as f64;
    let b = 1.0 / tgt.len() as f64;
    let rows = plan.gamma.row_sums().into_iter().map(|r| (r - a).abs());
    let cols = plan.gamma.col_sums().into_iter().map(|c| (c - b).abs());
    let marginal_violation = rows.chain(cols).fold(0.0, f64::max);
    let n_slides = src.blocks().len() as f64;
    Ok(Alignment {
        mean_transport_cost,
        marginal_violation,
        mean_gram_distortion: sgir_loss(map, src)? / n_slides,
        mean_attention_divergence: pacr_loss(map, model, src)? / n_slides,
    })
}

/// Evaluation document; field order is the serialized key order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub alignment: Option<Alignment>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Scores every labelled bag with `model`.
pub fn evaluate(model: &MilModel, bags: &[SlideBag]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for bag in bags {
        let y = bag
            .label
            .ok_or_else(|| HasdError::arg(format!("slide {} has no label", bag.slide_id)))?;
        scores.push(mil::predict(model, bag)?);
        labels.push(y);
    }
    Ok((scores, labels))
}

pub fn eval_report(
    model: &MilModel,
    bags: &[SlideBag],
    alignment: Option<Alignment>,
) -> Result<EvalReport> {
    let (scores, labels) = evaluate(model, bags)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    Ok(EvalReport {
        auroc: auroc(&scores, &labels)?,
        n_pos,
        n_neg: labels.len() - n_pos,
        alignment,
    })
}
