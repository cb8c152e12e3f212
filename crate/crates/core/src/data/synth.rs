//! Synthetic two-domain slide benchmark.
//!
//! Patches are drawn from a Gaussian mixture of background clusters; positive
//! slides additionally carry a fixed fraction of patches from a diagnostic
//! cluster. The target domain runs the same process with its own label
//! prevalence and then applies `x ↦ x Q + μ + noise`, where `Q` is an
//! orthogonal warp and `μ` a translation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::write_domain;
use crate::error::{HasdError, Result};
use crate::mil::SlideBag;
use crate::numerics::{random_orthogonal, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub warp: bool,
    /// Rotation angle (radians) applied in every plane of a random basis.
    pub warp_angle: f64,
    pub translation: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_slides: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub feature_dim: usize,
    pub signal_fraction: f64,
    pub n_background: usize,
    /// Norm scale of cluster means.
    pub cluster_scale: f64,
    /// Per-coordinate spread of patches around their cluster mean.
    pub cluster_sigma: f64,
    /// Distance of the diagnostic cluster from the background centroid.
    pub signal_offset: f64,
    /// Per-slide multiplicative jitter range of the background weights.
    pub mixture_jitter: (f64, f64),
    pub shift: ShiftSpec,
    pub prevalence_src: f64,
    pub prevalence_tgt: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_slides: 60,
            patches_min: 64,
            patches_max: 256,
            feature_dim: 32,
            signal_fraction: 0.15,
            n_background: 4,
            cluster_scale: 100.0,
            cluster_sigma: 1.0,
            signal_offset: 40.0,
            mixture_jitter: (0.5, 1.5),
            shift: ShiftSpec {
                warp: true,
                warp_angle: 1.25,
                translation: 10.0,
                noise_sigma: 0.1,
            },
            prevalence_src: 0.5,
            prevalence_tgt: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HasdError::arg(m));
        if self.n_slides < 2 {
            return err(format!("n_slides must be >= 2, got {}", self.n_slides));
        }
        if self.patches_min == 0 || self.patches_max < self.patches_min {
            return err(format!(
                "patch range must satisfy 1 <= min <= max, got {}..={}",
                self.patches_min, self.patches_max
            ));
        }
        if self.feature_dim == 0 || self.n_background == 0 {
            return err("feature_dim and n_background must be >= 1".into());
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction < 1.0) {
            return err(format!(
                "signal_fraction must lie in (0,1), got {}",
                self.signal_fraction
            ));
        }
        for (name, p) in [
            ("source", self.prevalence_src),
            ("target", self.prevalence_tgt),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return err(format!("{name} prevalence must lie in (0,1), got {p}"));
            }
            let n_pos = positives(self.n_slides, p);
            if n_pos == 0 || n_pos == self.n_slides {
                return err(format!(
                    "{name} prevalence {p} leaves a single class among {} slides",
                    self.n_slides
                ));
            }
        }
        let s = &self.shift;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(s.warp_angle) || !nonneg(s.translation) || !nonneg(s.noise_sigma) {
            return err("shift parameters must be finite and >= 0".into());
        }
        let (lo, hi) = self.mixture_jitter;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return err(format!(
                "mixture jitter must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            ));
        }
        if !nonneg(self.signal_offset) {
            return err("signal_offset must be finite and >= 0".into());
        }
        if !nonneg(self.cluster_scale)
            || !(self.cluster_sigma > 0.0 && self.cluster_sigma.is_finite())
        {
            return err("cluster_scale must be >= 0 and cluster_sigma > 0".into());
        }
        Ok(())
    }
}

fn positives(n: usize, prevalence: f64) -> usize {
    (prevalence * n as f64).round() as usize
}

/// Generating parameters, stored next to the generated domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub q: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub background_means: Vec<Vec<f64>>,
    pub signal_mean: Vec<f64>,
}

impl GroundTruth {
    pub fn q_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.q).expect("square warp")
    }

    /// Index of the diagnostic cluster in per-patch cluster labels.
    pub fn signal_cluster(&self) -> usize {
        self.background_means.len()
    }

    /// Cluster means after the target-domain shift.
    pub fn target_means(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let q = self.q_matrix();
        let shift = |m: &[f64]| -> Vec<f64> {
            let mut out = q.t_matvec(m);
            for (o, u) in out.iter_mut().zip(&self.mu) {
                *o += u;
            }
            out
        };
        (
            self.background_means.iter().map(|m| shift(m)).collect(),
            shift(&self.signal_mean),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    pub name: String,
    pub bags: Vec<SlideBag>,
    /// Generating cluster of every patch; `n_background` marks the signal
    /// cluster.
    pub patch_clusters: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub source: SyntheticDomain,
    pub target: SyntheticDomain,
    pub truth: GroundTruth,
}

/// `Q = U R(θ) Uᵀ` with `U` Haar-random and `R(θ)` rotating consecutive
/// coordinate pairs by `θ`.
fn warp_matrix(dim: usize, angle: f64, rng: &mut Rng) -> Matrix {
    let u = random_orthogonal(dim, rng);
    let mut r = Matrix::identity(dim);
    let (s, c) = angle.sin_cos();
    for p in (0..dim.saturating_sub(1)).step_by(2) {
        r[(p, p)] = c;
        r[(p, p + 1)] = -s;
        r[(p + 1, p)] = s;
        r[(p + 1, p + 1)] = c;
    }
    let ur = u.matmul(&r).expect("square");
    ur.matmul(&u.transpose()).expect("square")
}

fn random_mean(dim: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| rng.normal() * s).collect()
}

/// Centroid of the background means plus an offset orthogonal to all of
/// them, so that only the offset direction separates the classes.
fn signal_mean(background: &[Vec<f64>], offset: f64, rng: &mut Rng) -> Vec<f64> {
    let dim = background[0].len();
    let mut centroid = vec![0.0; dim];
    for m in background {
        crate::numerics::axpy(1.0 / background.len() as f64, m, &mut centroid);
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for m in background {
        let mut v = m.clone();
        for _ in 0..2 {
            for b in &basis {
                let p = crate::numerics::dot(&v, b);
                crate::numerics::axpy(-p, b, &mut v);
            }
        }
        let n = crate::numerics::norm(&v);
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    loop {
        let mut d: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = crate::numerics::dot(&d, b);
                crate::numerics::axpy(-p, b, &mut d);
            }
        }
        let n = crate::numerics::norm(&d);
        if n > 1e-9 || basis.len() >= dim {
            let scale = if n > 1e-9 { offset / n } else { 0.0 };
            return centroid
                .iter()
                .zip(&d)
                .map(|(c, v)| c + scale * v)
                .collect();
        }
    }
}

fn domain_labels(n: usize, prevalence: f64, rng: &mut Rng) -> Vec<bool> {
    let n_pos = positives(n, prevalence);
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    rng.shuffle(&mut labels);
    labels
}

fn sample_slide(
    spec: &SynthSpec,
    positive: bool,
    background: &[Vec<f64>],
    signal: &[f64],
    rng: &mut Rng,
) -> (Matrix, Vec<usize>) {
    let p = rng.range_inclusive(spec.patches_min, spec.patches_max);
    let n_signal = if positive {
        ((spec.signal_fraction * p as f64).round() as usize).clamp(1, p)
    } else {
        0
    };
    // cluster c has expected weight ∝ c + 1, jittered per slide
    let weights: Vec<f64> = (0..background.len())
        .map(|c| (c + 1) as f64 * rng.uniform(spec.mixture_jitter.0, spec.mixture_jitter.1))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut clusters = Vec::with_capacity(p);
    let mut x = Matrix::zeros(p, spec.feature_dim);
    for i in 0..p {
        let (cluster, mean) = if i < n_signal {
            (background.len(), signal)
        } else {
            let mut u = rng.unit() * total;
            let mut c = background.len() - 1;
            for (j, &w) in weights.iter().enumerate() {
                if u < w {
                    c = j;
                    break;
                }
                u -= w;
            }
            (c, background[c].as_slice())
        };
        clusters.push(cluster);
        for (v, &m) in x.row_mut(i).iter_mut().zip(mean) {
            *v = m + spec.cluster_sigma * rng.normal();
        }
    }
    (x, clusters)
}

fn sample_domain(
    spec: &SynthSpec,
    name: &str,
    prevalence: f64,
    background: &[Vec<f64>],
    signal: &[f64],
    rng: &mut Rng,
) -> (Vec<Matrix>, Vec<bool>, Vec<Vec<usize>>, Vec<String>) {
    let labels = domain_labels(spec.n_slides, prevalence, rng);
    let mut feats = Vec::with_capacity(spec.n_slides);
    let mut clusters = Vec::with_capacity(spec.n_slides);
    for &y in &labels {
        let (x, c) = sample_slide(spec, y, background, signal, rng);
        feats.push(x);
        clusters.push(c);
    }
    let ids = (0..spec.n_slides)
        .map(|i| format!("{name}_{i:03}"))
        .collect();
    (feats, labels, clusters, ids)
}

pub fn generate(spec: &SynthSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut rng = Rng::new(spec.seed);
    let background: Vec<Vec<f64>> = (0..spec.n_background)
        .map(|_| random_mean(dim, spec.cluster_scale, &mut rng))
        .collect();
    let signal = signal_mean(&background, spec.signal_offset, &mut rng);

    let q = if spec.shift.warp {
        warp_matrix(dim, spec.shift.warp_angle, &mut rng)
    } else {
        Matrix::identity(dim)
    };
    let mu: Vec<f64> = if spec.shift.translation > 0.0 {
        let dir = random_mean(dim, 1.0, &mut rng);
        let n = crate::numerics::norm(&dir);
        dir.iter().map(|v| v / n * spec.shift.translation).collect()
    } else {
        vec![0.0; dim]
    };

    let mut src_rng = rng.fork();
    let mut tgt_rng = rng.fork();
    let (src_x, src_y, src_c, src_ids) = sample_domain(
        spec,
        "src",
        spec.prevalence_src,
        &background,
        &signal,
        &mut src_rng,
    );
    let (tgt_raw, tgt_y, tgt_c, tgt_ids) = sample_domain(
        spec,
        "tgt",
        spec.prevalence_tgt,
        &background,
        &signal,
        &mut tgt_rng,
    );

    let make_bags = |xs: Vec<Matrix>, ys: &[bool], ids: Vec<String>| -> Result<Vec<SlideBag>> {
        xs.into_iter()
            .zip(ys)
            .zip(ids)
            .map(|((x, &y), id)| SlideBag::new(id, x, Some(y)))
            .collect()
    };

    let mut tgt_x = Vec::with_capacity(tgt_raw.len());
    for x in tgt_raw {
        let mut shifted = x.matmul(&q)?;
        for i in 0..shifted.rows() {
            for (v, &m) in shifted.row_mut(i).iter_mut().zip(&mu) {
                *v += m + spec.shift.noise_sigma * tgt_rng.normal();
            }
        }
        tgt_x.push(shifted);
    }

    let truth = GroundTruth {
        spec: *spec,
        q: q.row_iter().map(|r| r.to_vec()).collect(),
        mu,
        background_means: background,
        signal_mean: signal,
    };
    Ok(SyntheticBenchmark {
        source: SyntheticDomain {
            name: "source".into(),
            bags: make_bags(src_x, &src_y, src_ids)?,
            patch_clusters: src_c,
        },
        target: SyntheticDomain {
            name: "target".into(),
            bags: make_bags(tgt_x, &tgt_y, tgt_ids)?,
            patch_clusters: tgt_c,
        },
        truth,
    })
}

/// Writes `source/`, `target/` and `ground_truth.json` under `out`.
pub fn write_benchmark(out: &Path, bench: &SyntheticBenchmark) -> Result<()> {
    write_domain(&out.join("source"), &bench.source.name, &bench.source.bags)?;
    write_domain(&out.join("target"), &bench.target.name, &bench.target.bags)?;
    let path = out.join("ground_truth.json");
    let mut text = serde_json::to_string_pretty(&bench.truth).expect("ground truth serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| HasdError::io(&path, e))
}
