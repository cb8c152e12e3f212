//! Attention-based multiple instance learning.
//!
//! A bag of patch embeddings is scored patch by patch with `wᵀ tanh(V r)`,
//! softmax-normalised into attention weights, pooled into a slide vector
//! `z = Σ a_p r_p`, and classified by a single logistic unit. Training is
//! full-batch gradient descent on mean binary cross-entropy with hand-written
//! backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{HasdError, Result};
use crate::numerics::{axpy, dot, sigmoid, softmax, Matrix, Rng};

/// One slide: `P` patch embeddings of width `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub features: Matrix,
    pub label: Option<bool>,
}

impl SlideBag {
    pub fn new(slide_id: impl Into<String>, features: Matrix, label: Option<bool>) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.rows() == 0 {
            return Err(HasdError::arg(format!("slide {slide_id} has no patches")));
        }
        if !features.is_finite() {
            return Err(HasdError::arg(format!(
                "slide {slide_id} has non-finite features"
            )));
        }
        Ok(Self {
            slide_id,
            features,
            label,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    /// Attention projection, `L × M`.
    pub v: Matrix,
    /// Attention scoring vector, length `L`.
    pub w: Vec<f64>,
    pub clf_weight: Vec<f64>,
    pub clf_bias: f64,
}

impl MilModel {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            v: Matrix::zeros(hidden, dim),
            w: vec![0.0; hidden],
            clf_weight: vec![0.0; dim],
            clf_bias: 0.0,
        }
    }

    /// Weights uniform in `[-scale, scale]`, bias zero.
    pub fn init(hidden: usize, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let v = rng.uniform_matrix(hidden, dim, -scale, scale);
        let w = (0..hidden).map(|_| rng.uniform(-scale, scale)).collect();
        let clf_weight = (0..dim).map(|_| rng.uniform(-scale, scale)).collect();
        Self {
            v,
            w,
            clf_weight,
            clf_bias: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.v.rows()
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, m) = self.v.shape();
        if l == 0 || self.w.len() != l || self.clf_weight.len() != m {
            return Err(HasdError::arg(format!(
                "inconsistent model shapes: V {l}x{m}, w {}, clf_weight {}",
                self.w.len(),
                self.clf_weight.len()
            )));
        }
        let finite = self.v.is_finite()
            && self.w.iter().all(|x| x.is_finite())
            && self.clf_weight.iter().all(|x| x.is_finite())
            && self.clf_bias.is_finite();
        if !finite {
            return Err(HasdError::arg("model has non-finite parameters"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.v.data().len() + self.w.len() + self.clf_weight.len() + 1
    }

    /// Flattened parameters in the order `V, w, clf_weight, clf_bias`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(self.v.data());
        p.extend_from_slice(&self.w);
        p.extend_from_slice(&self.clf_weight);
        p.push(self.clf_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let nv = self.v.data().len();
        let l = self.w.len();
        let m = self.clf_weight.len();
        self.v.data_mut().copy_from_slice(&p[..nv]);
        self.w.copy_from_slice(&p[nv..nv + l]);
        self.clf_weight.copy_from_slice(&p[nv + l..nv + l + m]);
        self.clf_bias = p[nv + l + m];
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(HasdError::arg(format!(
                "feature dimension {} does not match model dimension {}",
                x.cols(),
                self.dim()
            )));
        }
        if x.rows() == 0 {
            return Err(HasdError::arg("attention over an empty bag"));
        }
        Ok(())
    }
}

/// Raw attention logits `wᵀ tanh(V r_p)` and the hidden activations.
fn attention_forward(model: &MilModel, x: &Matrix) -> (Vec<f64>, Matrix) {
    let mut hidden = Matrix::zeros(x.rows(), model.hidden());
    let mut logits = Vec::with_capacity(x.rows());
    for p in 0..x.rows() {
        let r = x.row(p);
        let h = hidden.row_mut(p);
        for (k, hk) in h.iter_mut().enumerate() {
            *hk = dot(model.v.row(k), r).tanh();
        }
        logits.push(dot(&model.w, h));
    }
    (logits, hidden)
}

pub fn attention_logits(model: &MilModel, x: &Matrix) -> Result<Vec<f64>> {
    model.check_dim(x)?;
    Ok(attention_forward(model, x).0)
}

/// Softmax attention over the rows of `x`.
pub fn attention_scores(model: &MilModel, x: &Matrix) -> Result<Vec<f64>> {
    Ok(softmax(&attention_logits(model, x)?))
}

pub fn aggregate(model: &MilModel, bag: &SlideBag) -> Result<Vec<f64>> {
    aggregate_features(model, &bag.features)
}

pub fn aggregate_features(model: &MilModel, x: &Matrix) -> Result<Vec<f64>> {
    let a = attention_scores(model, x)?;
    Ok(x.t_matvec(&a))
}

pub fn predict(model: &MilModel, bag: &SlideBag) -> Result<f64> {
    predict_features(model, &bag.features)
}

pub fn predict_features(model: &MilModel, x: &Matrix) -> Result<f64> {
    let z = aggregate_features(model, x)?;
    Ok(sigmoid(dot(&model.clf_weight, &z) + model.clf_bias))
}

/// `−[y log σ(t) + (1−y) log(1−σ(t))]` evaluated without cancellation.
fn bce_from_logit(logit: f64, label: bool) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    if label {
        softplus - logit
    } else {
        softplus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Attention hidden width `L`.
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            step_size: 1e-3,
            init_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(HasdError::arg("attention hidden size must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(HasdError::arg(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(HasdError::arg("init scale must be finite and >= 0"));
        }
        Ok(())
    }
}

fn labelled(bags: &[SlideBag]) -> Result<Vec<bool>> {
    bags.iter()
        .map(|b| {
            b.label
                .ok_or_else(|| HasdError::arg(format!("training bag {} has no label", b.slide_id)))
        })
        .collect()
}

/// Mean BCE over labelled bags and its gradient in [`MilModel::to_params`]
/// order.
pub fn bce_loss_and_grad(model: &MilModel, bags: &[SlideBag]) -> Result<(f64, Vec<f64>)> {
    let labels = labelled(bags)?;
    if bags.is_empty() {
        return Err(HasdError::arg("loss over an empty bag list"));
    }
    let (l, m) = model.v.shape();
    let mut g_v = Matrix::zeros(l, m);
    let mut g_w = vec![0.0; l];
    let mut g_c = vec![0.0; m];
    let mut g_b = 0.0;
    let mut total = 0.0;
    let scale = 1.0 / bags.len() as f64;

    for (bag, &y) in bags.iter().zip(&labels) {
        let x = &bag.features;
        model.check_dim(x)?;
        let (logits, hidden) = attention_forward(model, x);
        let a = softmax(&logits);
        let z = x.t_matvec(&a);
        let t = dot(&model.clf_weight, &z) + model.clf_bias;
        total += bce_from_logit(t, y);

        let delta = (sigmoid(t) - if y { 1.0 } else { 0.0 }) * scale;
        axpy(delta, &z, &mut g_c);
        g_b += delta;

        // dL/da_p = δ c·r_p, then through the softmax
        let da: Vec<f64> = x
            .row_iter()
            .map(|r| delta * dot(&model.clf_weight, r))
            .collect();
        let mean_da = dot(&a, &da);
        for p in 0..x.rows() {
            let ds = a[p] * (da[p] - mean_da);
            if ds == 0.0 {
                continue;
            }
            let h = hidden.row(p);
            axpy(ds, h, &mut g_w);
            let r = x.row(p);
            for k in 0..l {
                let dh = ds * model.w[k] * (1.0 - h[k] * h[k]);
                axpy(dh, r, g_v.row_mut(k));
            }
        }
    }

    let mut grad = g_v.into_data();
    grad.extend_from_slice(&g_w);
    grad.extend_from_slice(&g_c);
    grad.push(g_b);
    Ok((total * scale, grad))
}

pub fn bce_loss(model: &MilModel, bags: &[SlideBag]) -> Result<f64> {
    let labels = labelled(bags)?;
    let mut total = 0.0;
    for (bag, &y) in bags.iter().zip(&labels) {
        let z = aggregate(model, bag)?;
        total += bce_from_logit(dot(&model.clf_weight, &z) + model.clf_bias, y);
    }
    Ok(total / bags.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MilModel,
    /// `losses[0]` is the loss at initialisation, `losses[e]` after epoch `e`.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

fn check_both_classes(labels: &[bool]) -> Result<()> {
    if labels.len() < 2 || labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(HasdError::arg(
            "training needs at least two bags covering both labels",
        ));
    }
    Ok(())
}

pub fn train_source(bags: &[SlideBag], cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainReport> {
    cfg.validate()?;
    let labels = labelled(bags)?;
    check_both_classes(&labels)?;
    let dim = bags[0].dim();
    let model = MilModel::init(cfg.hidden, dim, cfg.init_scale, rng);
    descend(model, bags, cfg.epochs, cfg.step_size, |_| true)
}

/// Refits only the classifier head on `bags`, keeping `V` and `w` frozen.
pub fn refit_head(
    model: &MilModel,
    bags: &[SlideBag],
    epochs: usize,
    step_size: f64,
) -> Result<TrainReport> {
    let labels = labelled(bags)?;
    check_both_classes(&labels)?;
    let head_start = model.v.data().len() + model.w.len();
    descend(model.clone(), bags, epochs, step_size, |i| i >= head_start)
}

fn descend(
    mut model: MilModel,
    bags: &[SlideBag],
    epochs: usize,
    step_size: f64,
    trainable: impl Fn(usize) -> bool,
) -> Result<TrainReport> {
    let mut params = model.to_params();
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let (loss, grad) = bce_loss_and_grad(&model, bags)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(HasdError::numeric(
                epoch,
                "non-finite training loss or gradient",
            ));
        }
        losses.push(loss);
        if epoch == epochs {
            break;
        }
        for (i, (p, g)) in params.iter_mut().zip(&grad).enumerate() {
            if trainable(i) {
                *p -= step_size * g;
            }
        }
        model.set_params(&params);
    }
    Ok(TrainReport { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};

    fn random_model(rng: &mut Rng, l: usize, m: usize, scale: f64) -> MilModel {
        let mut model = MilModel::init(l, m, scale, rng);
        model.clf_bias = rng.uniform(-0.5, 0.5);
        model
    }

    fn direct_scores(model: &MilModel, x: &Matrix) -> Vec<f64> {
        let mut logits = vec![];
        for p in 0..x.rows() {
            let mut s = 0.0;
            for k in 0..model.hidden() {
                let mut pre = 0.0;
                for m in 0..model.dim() {
                    pre += model.v[(k, m)] * x[(p, m)];
                }
                s += model.w[k] * pre.tanh();
            }
            logits.push(s);
        }
        let total: f64 = logits.iter().map(|s| s.exp()).sum();
        logits.iter().map(|s| s.exp() / total).collect()
    }

    #[test]
    fn zero_projection_gives_uniform_attention() {
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(5, 3);
        let model = MilModel {
            w: vec![1.0, -2.0],
            ..MilModel::zeros(2, 3)
        };
        let a = attention_scores(&model, &x).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn singleton_bag_attention_is_one() {
        let mut rng = Rng::new(2);
        let model = random_model(&mut rng, 4, 3, 1.0);
        let x = rng.normal_matrix(1, 3);
        assert_eq!(attention_scores(&model, &x).unwrap(), vec![1.0]);
    }

    #[test]
    fn scores_match_scalar_loop() {
        let mut rng = Rng::new(3);
        let model = random_model(&mut rng, 6, 4, 1.0);
        let x = rng.normal_matrix(7, 4);
        let a = attention_scores(&model, &x).unwrap();
        let oracle = direct_scores(&model, &x);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (u, v) in a.iter().zip(&oracle) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let model = MilModel::zeros(2, 3);
        let x = Matrix::zeros(4, 5);
        assert!(matches!(
            attention_scores(&model, &x),
            Err(HasdError::Argument(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(4, 3);
        let bag = SlideBag::new("s", x.clone(), None).unwrap();
        let uniform = MilModel::zeros(2, 3);
        let z = aggregate(&uniform, &bag).unwrap();
        for (zm, mean) in z.iter().zip(x.col_means()) {
            assert!((zm - mean).abs() < 1e-12);
        }

        // one-hot attention: a huge logit on row 2 only
        let mut peaked = MilModel::zeros(1, 3);
        peaked.w = vec![1e4];
        let target = x.row(2).to_vec();
        let others_max = (0..4)
            .filter(|&p| p != 2)
            .map(|p| dot(x.row(p), &target))
            .fold(f64::MIN, f64::max);
        if dot(&target, &target) > others_max + 0.5 {
            peaked.v.row_mut(0).copy_from_slice(&target);
            let z = aggregate(&peaked, &bag).unwrap();
            for (u, v) in z.iter().zip(&target) {
                assert!((u - v).abs() < 1e-9);
            }
        }

        let model = random_model(&mut rng, 5, 3, 1.0);
        let a = direct_scores(&model, &x);
        let z = aggregate(&model, &bag).unwrap();
        for m in 0..3 {
            let want: f64 = (0..4).map(|p| a[p] * x[(p, m)]).sum();
            assert!((z[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_examples() {
        let mut rng = Rng::new(5);
        let x = rng.normal_matrix(3, 2);
        let bag = SlideBag::new("s", x.clone(), None).unwrap();
        let mut model = random_model(&mut rng, 3, 2, 1.0);
        let mut flat = model.clone();
        flat.clf_weight = vec![0.0; 2];
        flat.clf_bias = 0.0;
        assert_eq!(predict(&flat, &bag).unwrap(), 0.5);
        flat.clf_bias = 20.0;
        assert!(predict(&flat, &bag).unwrap() > 0.9999);

        model.clf_bias = 0.3;
        let a = direct_scores(&model, &x);
        let z: Vec<f64> = (0..2)
            .map(|m| (0..3).map(|p| a[p] * x[(p, m)]).sum())
            .collect();
        let t: f64 = model
            .clf_weight
            .iter()
            .zip(&z)
            .map(|(c, v)| c * v)
            .sum::<f64>()
            + 0.3;
        let want = 1.0 / (1.0 + (-t).exp());
        assert!((predict(&model, &bag).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = Rng::new(6);
        let model = random_model(&mut rng, 4, 3, 1.0);
        let x = rng.normal_matrix(6, 3);
        let mut order: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut order);
        let xp = x.select_rows(&order);
        let a = attention_scores(&model, &x).unwrap();
        let ap = attention_scores(&model, &xp).unwrap();
        for (i, &o) in order.iter().enumerate() {
            assert!((ap[i] - a[o]).abs() < 1e-12);
        }
        let b = SlideBag::new("a", x, None).unwrap();
        let bp = SlideBag::new("b", xp, None).unwrap();
        let (p, pp) = (predict(&model, &b).unwrap(), predict(&model, &bp).unwrap());
        assert!((p - pp).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let model = random_model(&mut rng, 3, 4, 0.8);
        let bags: Vec<SlideBag> = (0..4)
            .map(|i| {
                let p = 2 + i;
                SlideBag::new(format!("s{i}"), rng.normal_matrix(p, 4), Some(i % 2 == 0)).unwrap()
            })
            .collect();
        let (_, grad) = bce_loss_and_grad(&model, &bags).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_params(p);
                bce_loss(&m, &bags).unwrap()
            },
            &model.to_params(),
            1e-6,
        )
        .unwrap();
        for (a, n) in grad.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-4 * n.abs().max(1e-4), "{a} vs {n}");
        }
    }

    #[test]
    fn training_rejects_single_class_and_zero_epochs_is_identity() {
        let mut rng = Rng::new(8);
        let bags: Vec<SlideBag> = (0..3)
            .map(|i| SlideBag::new(format!("s{i}"), rng.normal_matrix(3, 2), Some(true)).unwrap())
            .collect();
        assert!(matches!(
            train_source(&bags, &TrainConfig::default(), &mut Rng::new(1)),
            Err(HasdError::Argument(_))
        ));

        let mut mixed = bags.clone();
        mixed[0].label = Some(false);
        let cfg = TrainConfig {
            epochs: 0,
            hidden: 4,
            ..TrainConfig::default()
        };
        let report = train_source(&mixed, &cfg, &mut Rng::new(9)).unwrap();
        let init = MilModel::init(4, 2, cfg.init_scale, &mut Rng::new(9));
        assert_eq!(report.model, init);
        assert_eq!(report.losses.len(), 1);
    }

    #[test]
    fn refit_head_keeps_attention() {
        let mut rng = Rng::new(10);
        let model = random_model(&mut rng, 3, 2, 0.5);
        let bags: Vec<SlideBag> = (0..4)
            .map(|i| SlideBag::new(format!("s{i}"), rng.normal_matrix(3, 2), Some(i < 2)).unwrap())
            .collect();
        let out = refit_head(&model, &bags, 20, 0.1).unwrap();
        assert_eq!(out.model.v, model.v);
        assert_eq!(out.model.w, model.w);
        assert_ne!(out.model.clf_weight, model.clf_weight);
        assert!(out.final_loss() <= out.losses[0]);
    }
}
