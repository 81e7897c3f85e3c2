//! Spherical k-means over encoder features, per-cluster concentrations and
//! the refit schedule.
//!
//! Points and centers live on the unit sphere: points are L2-normalised
//! before fitting, centers are renormalised after every mean update, and
//! assignment picks the center of maximum cosine similarity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Tensor};
use crate::error::{CclError, Result};
use crate::losses::concentration;
use crate::par;

/// Which representation is clustered or scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureLayer {
    /// Encoder output `h`.
    Embedding,
    /// Projection head output `z`.
    Projection,
}

impl fmt::Display for FeatureLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureLayer::Embedding => "embedding",
            FeatureLayer::Projection => "projection",
        })
    }
}

impl FromStr for FeatureLayer {
    type Err = CclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(FeatureLayer::Embedding),
            "projection" => Ok(FeatureLayer::Projection),
            other => Err(CclError::Config(format!(
                "unknown layer {other:?} (expected embedding or projection)"
            ))),
        }
    }
}

/// Output of [`kmeans_fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// Unit-norm centers, `R × d`.
    pub centers: Tensor,
    /// Assignment of every input point under the final centers.
    pub assignments: Vec<usize>,
    /// Lloyd iterations run.
    pub iterations: usize,
    /// `Σ (1 − cos(x, c_{a(x)}))` after each assignment step.
    pub objective: Vec<f64>,
}

/// Index of the most similar center for every point; ties go to the lowest
/// index.
pub fn assign(points: &Tensor, centers: &Tensor) -> Result<Vec<usize>> {
    Ok(best_matches(points, centers)?
        .into_iter()
        .map(|(j, _)| j)
        .collect())
}

/// Maximum cosine similarity of every point to any center.
pub fn max_similarities(points: &Tensor, centers: &Tensor) -> Result<Vec<f64>> {
    Ok(best_matches(points, centers)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

fn best_matches(points: &Tensor, centers: &Tensor) -> Result<Vec<(usize, f64)>> {
    let (_, d) = points.dims2()?;
    let (r, dc) = centers.dims2()?;
    if d != dc {
        return Err(CclError::dim("assign", points.shape(), centers.shape()));
    }
    if r == 0 {
        return Err(CclError::Contract(
            "assign needs at least one center".into(),
        ));
    }
    let (pn, _) = ops::normalize_rows(points)?;
    let (cn, _) = ops::normalize_rows(centers)?;
    Ok(nearest_unit(&pn, &cn))
}

/// Argmax of dot products for already-normalised rows.
fn nearest_unit(points: &Tensor, centers: &Tensor) -> Vec<(usize, f64)> {
    par::map_range(points.rows(), |i| {
        let p = points.row(i);
        let mut best = (0, f64::NEG_INFINITY);
        for (j, c) in centers.row_iter().enumerate() {
            let s: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks an index with probability proportional to `weights` using a single
/// uniform draw against the running sum.
fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random();
    if total <= 0.0 {
        return ((u * weights.len() as f64) as usize).min(weights.len() - 1);
    }
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// k-means++ seeding on unit-norm rows.
fn plus_plus(unit: &Tensor, r: usize, rng: &mut impl Rng) -> Tensor {
    let m = unit.rows();
    let d = unit.cols();
    let mut chosen = Vec::with_capacity(r);
    let uniform = vec![1.0; m];
    chosen.push(weighted_pick(&uniform, rng));
    let mut dist: Vec<f64> = unit
        .row_iter()
        .map(|p| sq_dist(p, unit.row(chosen[0])))
        .collect();
    while chosen.len() < r {
        let next = weighted_pick(&dist, rng);
        chosen.push(next);
        for (i, p) in unit.row_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, unit.row(next)));
        }
    }
    let mut centers = Tensor::zeros(&[r, d]);
    for (j, &i) in chosen.iter().enumerate() {
        centers.row_mut(j).copy_from_slice(unit.row(i));
    }
    centers
}

fn objective(matches: &[(usize, f64)]) -> f64 {
    matches.iter().map(|(_, s)| 1.0 - s).sum()
}

/// Moves every empty center onto the point farthest from its own center,
/// taking points only from clusters that keep at least one other member.
/// Returns the number of repaired centers.
fn repair_empty(
    unit: &Tensor,
    centers: &mut Tensor,
    matches: &mut [(usize, f64)],
) -> Result<usize> {
    let r = centers.rows();
    let mut counts = vec![0usize; r];
    for (a, _) in matches.iter() {
        counts[*a] += 1;
    }
    let mut repaired = 0;
    for j in 0..r {
        if counts[j] > 0 {
            continue;
        }
        let donor = matches
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| counts[*a] > 1)
            .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1).then(x.0.cmp(&y.0)))
            .map(|(i, _)| i)
            .ok_or_else(|| {
                CclError::Numeric("cannot repair an empty cluster: too few distinct points".into())
            })?;
        counts[matches[donor].0] -= 1;
        counts[j] = 1;
        matches[donor] = (j, 1.0);
        centers.row_mut(j).copy_from_slice(unit.row(donor));
        repaired += 1;
    }
    Ok(repaired)
}

/// Lloyd iterations from explicit starting centers (normalised internally).
pub fn kmeans_fit_from(
    points: &Tensor,
    initial: &Tensor,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let (m, d) = points.dims2()?;
    let (r, dc) = initial.dims2()?;
    if d != dc {
        return Err(CclError::dim("kmeans", points.shape(), initial.shape()));
    }
    if r < 2 || m < r {
        return Err(CclError::Config(format!(
            "k-means needs 2 <= R <= M, got R = {r}, M = {m}"
        )));
    }
    if !points.is_finite() {
        return Err(CclError::domain("kmeans", "non-finite point"));
    }
    let (unit, _) = ops::normalize_rows(points)?;
    let (mut centers, _) = ops::normalize_rows(initial)?;
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut matches = nearest_unit(&unit, &centers);
        history.push(objective(&matches));

        let mut sums = Tensor::zeros(&[r, d]);
        for (i, (a, _)) in matches.iter().enumerate() {
            for (s, v) in sums.row_mut(*a).iter_mut().zip(unit.row(i)) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        for j in 0..r {
            let norm = sums.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (c, s) in next.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s / norm;
                }
            }
            // a vanished mean (members cancel exactly) keeps the previous center
        }
        repair_empty(&unit, &mut next, &mut matches)?;

        let movement = centers
            .row_iter()
            .zip(next.row_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if movement < tol {
            break;
        }
    }

    let mut matches = nearest_unit(&unit, &centers);
    for _ in 0..r {
        if repair_empty(&unit, &mut centers, &mut matches)? == 0 {
            break;
        }
        matches = nearest_unit(&unit, &centers);
    }
    let mut counts = vec![0usize; r];
    for (a, _) in &matches {
        counts[*a] += 1;
    }
    if counts.contains(&0) {
        return Err(CclError::Numeric("k-means left an empty cluster".into()));
    }
    Ok(KMeansFit {
        centers,
        assignments: matches.into_iter().map(|(a, _)| a).collect(),
        iterations,
        objective: history,
    })
}

/// Spherical k-means with k-means++ seeding from `seed`.
pub fn kmeans_fit(
    points: &Tensor,
    r: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let (m, _) = points.dims2()?;
    if r < 2 || m < r {
        return Err(CclError::Config(format!(
            "k-means needs 2 <= R <= M, got R = {r}, M = {m}"
        )));
    }
    let (unit, _) = ops::normalize_rows(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = plus_plus(&unit, r, &mut rng);
    kmeans_fit_from(points, &init, max_iters, tol)
}

/// Concentration of every cluster, computed on `points` as given.
pub fn compute_concentrations(
    points: &Tensor,
    assignments: &[usize],
    centers: &Tensor,
    alpha: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    let (m, d) = points.dims2()?;
    let (r, dc) = centers.dims2()?;
    if d != dc {
        return Err(CclError::dim(
            "concentrations",
            points.shape(),
            centers.shape(),
        ));
    }
    if assignments.len() != m {
        return Err(CclError::dim("concentrations", &[m], &[assignments.len()]));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, &a) in assignments.iter().enumerate() {
        members
            .get_mut(a)
            .ok_or_else(|| CclError::Contract(format!("assignment {a} outside 0..{r}")))?
            .push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(j, idx)| {
            if idx.is_empty() {
                return Err(CclError::Contract(format!("cluster {j} is empty")));
            }
            concentration(&points.select_rows(idx), centers.row(j), alpha, floor)
        })
        .collect()
}

/// k-means and concentration settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterParams {
    pub clusters: usize,
    pub alpha: f64,
    pub phi_floor: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            clusters: 10,
            alpha: 10.0,
            phi_floor: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Current centers, assignments and concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub centers: Tensor,
    /// One entry per sample of the set the centers were fitted on.
    pub assignments: Vec<usize>,
    pub phis: Vec<f64>,
    pub layer: FeatureLayer,
    pub updated_at_epoch: usize,
}

impl ClusterState {
    /// Fits centers on `features`, assigns every row and computes
    /// concentrations on the normalised rows.
    pub fn fit(
        features: &Tensor,
        params: &ClusterParams,
        seed: u64,
        layer: FeatureLayer,
        epoch: usize,
    ) -> Result<ClusterState> {
        let fit = kmeans_fit(
            features,
            params.clusters,
            seed,
            params.max_iters,
            params.tol,
        )?;
        let (unit, _) = ops::normalize_rows(features)?;
        let phis = compute_concentrations(
            &unit,
            &fit.assignments,
            &fit.centers,
            params.alpha,
            params.phi_floor,
        )?;
        let state = ClusterState {
            centers: fit.centers,
            assignments: fit.assignments,
            phis,
            layer,
            updated_at_epoch: epoch,
        };
        state.validate(params.phi_floor)?;
        Ok(state)
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn validate(&self, phi_floor: f64) -> Result<()> {
        let r = self.num_clusters();
        if self.phis.len() != r {
            return Err(CclError::dim("cluster state", &[r], &[self.phis.len()]));
        }
        let mut counts = vec![0usize; r];
        for &a in &self.assignments {
            *counts
                .get_mut(a)
                .ok_or_else(|| CclError::Contract(format!("assignment {a} outside 0..{r}")))? += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(CclError::Contract(format!("cluster {j} has no members")));
        }
        if let Some(p) = self.phis.iter().find(|&&p| !(p >= phi_floor)) {
            return Err(CclError::Contract(format!(
                "concentration {p} below floor {phi_floor}"
            )));
        }
        Ok(())
    }
}

/// How often centers are refit once warm-up is over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateInterval {
    /// Every `n` epochs, counted from the first post-warm-up epoch.
    Epochs(usize),
    /// Before every batch.
    EveryBatch,
}

impl fmt::Display for UpdateInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateInterval::Epochs(n) => write!(f, "{n}"),
            UpdateInterval::EveryBatch => f.write_str("batch"),
        }
    }
}

impl FromStr for UpdateInterval {
    type Err = CclError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "batch" {
            return Ok(UpdateInterval::EveryBatch);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(UpdateInterval::Epochs(n)),
            _ => Err(CclError::Config(format!(
                "update interval must be a positive integer or \"batch\", got {s:?}"
            ))),
        }
    }
}

/// Warm-up length and refit interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterSchedule {
    pub warmup_epochs: usize,
    pub interval: UpdateInterval,
}

impl ClusterSchedule {
    pub fn new(warmup_epochs: usize, interval: UpdateInterval) -> Result<Self> {
        if interval == UpdateInterval::Epochs(0) {
            return Err(CclError::Config(
                "update interval must be at least 1".into(),
            ));
        }
        Ok(ClusterSchedule {
            warmup_epochs,
            interval,
        })
    }

    /// Whether cluster-aware training is active in `epoch`.
    pub fn is_joint(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
    }
}

/// True iff centers are refit at the start of `epoch`.
pub fn should_update(epoch: usize, schedule: &ClusterSchedule) -> bool {
    if epoch < schedule.warmup_epochs {
        return false;
    }
    match schedule.interval {
        UpdateInterval::Epochs(u) => (epoch - schedule.warmup_epochs) % u == 0,
        UpdateInterval::EveryBatch => true,
    }
}
