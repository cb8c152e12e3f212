//! Label-free prototype selection: each slide is reduced to the `k` centroids
//! of a k-means clustering of its patches.

use crate::error::{HasdError, Result};
use crate::mil::SlideBag;
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub slide_id: String,
    pub centroids: Matrix,
    pub assignment_counts: Vec<usize>,
    /// Sum of squared distances of patches to their assigned centroid.
    pub inertia: f64,
    /// Inertia after every Lloyd update, first entry after seeding's first pass.
    pub inertia_history: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_plus_plus(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.index(n)];
    let mut d2: Vec<f64> = x.row_iter().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.unit() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            // guard against landing on a zero-weight tail through rounding
            if d2[idx] == 0.0 {
                d2.iter().rposition(|&d| d > 0.0).unwrap_or(idx)
            } else {
                idx
            }
        } else {
            // every point coincides with a chosen centre
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.index(free.len())]
        };
        chosen.push(pick);
        for (i, r) in x.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    x.select_rows(&chosen)
}

fn update_centroids(x: &Matrix, assign: &[usize], k: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (r, &c) in x.row_iter().zip(assign) {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(r) {
            *s += v;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for s in sums.row_mut(c) {
                *s /= cnt as f64;
            }
        }
    }
    (sums, counts)
}

fn inertia_of(x: &Matrix, centroids: &Matrix, assign: &[usize]) -> f64 {
    x.row_iter()
        .zip(assign)
        .map(|(r, &c)| sq_dist(r, centroids.row(c)))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments no longer change or after `max_iters` updates. An
/// empty cluster takes over the patch farthest from its own centroid.
pub fn kmeans(bag: &SlideBag, k: usize, rng: &mut Rng, max_iters: usize) -> Result<PrototypeSet> {
    let x = &bag.features;
    let n = x.rows();
    if k == 0 {
        return Err(HasdError::arg("k must be at least 1"));
    }
    if k > n {
        return Err(HasdError::arg(format!(
            "k = {k} exceeds the {n} patches of slide {}",
            bag.slide_id
        )));
    }

    let mut centroids = seed_plus_plus(x, k, rng);
    let mut assign: Vec<usize> = x.row_iter().map(|r| nearest(r, &centroids).0).collect();
    let mut counts;
    let mut history = Vec::new();

    for it in 0..max_iters.max(1) {
        if it > 0 {
            let next: Vec<usize> = x.row_iter().map(|r| nearest(r, &centroids).0).collect();
            if next == assign {
                break;
            }
            assign = next;
        }
        (centroids, counts) = update_centroids(x, &assign, k);
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let (far, _) = x
                .row_iter()
                .zip(&assign)
                .enumerate()
                .filter(|(_, (_, &c))| counts[c] > 1)
                .map(|(i, (r, &c))| (i, sq_dist(r, centroids.row(c))))
                .fold(
                    (usize::MAX, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            assign[far] = empty;
            (centroids, counts) = update_centroids(x, &assign, k);
        }
        history.push(inertia_of(x, &centroids, &assign));
    }

    let (centroids, counts) = update_centroids(x, &assign, k);
    let inertia = inertia_of(x, &centroids, &assign);
    Ok(PrototypeSet {
        slide_id: bag.slide_id.clone(),
        centroids,
        assignment_counts: counts,
        inertia,
        inertia_history: history,
        assignments: assign,
    })
}

/// Per-slide prototypes stacked into one domain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDomain {
    /// `(Σ k_n) × M`, rows ordered bag by bag.
    pub matrix: Matrix,
    /// Slide index of each row of `matrix`.
    pub slide_index: Vec<usize>,
    pub sets: Vec<PrototypeSet>,
}

impl PrototypeDomain {
    /// Row ranges of each slide's block.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        block_ranges(&self.slide_index)
    }
}

/// Contiguous row ranges of equal slide index.
pub fn block_ranges(slide_index: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=slide_index.len() {
        if i == slide_index.len() || slide_index[i] != slide_index[start] {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Clusters every bag with its own child stream of `rng` (one draw per bag,
/// in bag order) and stacks the centroids.
pub fn prototype_domain(
    bags: &[SlideBag],
    k: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<PrototypeDomain> {
    let dim = bags
        .first()
        .map(|b| b.dim())
        .ok_or_else(|| HasdError::arg("prototype_domain needs at least one bag"))?;
    let mut sets = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.dim() != dim {
            return Err(HasdError::arg(format!(
                "slide {} has dimension {}, expected {dim}",
                bag.slide_id,
                bag.dim()
            )));
        }
        let mut child = rng.fork();
        sets.push(kmeans(bag, k, &mut child, max_iters)?);
    }
    let blocks: Vec<&Matrix> = sets.iter().map(|s| &s.centroids).collect();
    let matrix = Matrix::vstack(&blocks)?;
    let slide_index = sets
        .iter()
        .enumerate()
        .flat_map(|(n, s)| std::iter::repeat_n(n, s.centroids.rows()))
        .collect();
    Ok(PrototypeDomain {
        matrix,
        slide_index,
        sets,
    })
}
