//! OOD scores against a bank of training features, and exact AUROC.
//!
//! Higher scores mean "more in-distribution".

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ops, Tensor};
use crate::error::{CclError, Result};
use crate::par;

/// Lower clamp for the top-K standard deviation in [`score_var`].
pub const VAR_DENOMINATOR_FLOOR: f64 = 1e-8;

/// Training-set features with cached norms and unit rows.
#[derive(Clone, Debug)]
pub struct ReferenceBank {
    features: Tensor,
    unit: Tensor,
    norms: Vec<f64>,
}

impl ReferenceBank {
    pub fn new(features: Tensor) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if m == 0 {
            return Err(CclError::Contract("reference bank is empty".into()));
        }
        let (unit, norms) = ops::normalize_rows(&features)?;
        Ok(ReferenceBank {
            features,
            unit,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// `sim(bank_m, z) · ‖bank_m‖` for every bank row.
    pub fn candidate_scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(CclError::dim(
                "score",
                &[self.len(), self.dim()],
                &[z.len()],
            ));
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(zn > 0.0 && zn.is_finite()) {
            return Err(CclError::domain("score", format!("query has norm {zn}")));
        }
        Ok(self
            .unit
            .row_iter()
            .zip(&self.norms)
            .map(|(u, n)| u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / zn * n)
            .collect())
    }
}

/// Which score function to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Cos,
    Var,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Cos => "cos",
            ScoreKind::Var => "var",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = CclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(ScoreKind::Cos),
            "var" => Ok(ScoreKind::Var),
            other => Err(CclError::Config(format!(
                "unknown score kind {other:?} (cos | var)"
            ))),
        }
    }
}

/// `max_m sim(bank_m, z) · ‖bank_m‖`.
pub fn score_cos(bank: &ReferenceBank, z: &[f64]) -> Result<f64> {
    Ok(bank
        .candidate_scores(z)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Result of [`score_var`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarScore {
    pub score: f64,
    pub score_cos: f64,
    /// Clamped standard deviation of the top-K bank features.
    pub denominator: f64,
    /// The raw standard deviation fell below the clamp.
    pub degenerate: bool,
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Bank rows selected for the variance denominator of `z`.
pub fn top_k_rows(bank: &ReferenceBank, z: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(bank, k)?;
    Ok(top_k(&bank.candidate_scores(z)?, k))
}

fn check_k(bank: &ReferenceBank, k: usize) -> Result<()> {
    if k < 2 || k > bank.len() {
        return Err(CclError::Config(format!(
            "K must satisfy 2 <= K <= {}, got {k}",
            bank.len()
        )));
    }
    Ok(())
}

/// `score_cos(z)` divided by the standard deviation of the `k` bank features
/// with the highest candidate scores. The deviation of a vector from the mean
/// is measured as its squared L2 norm.
pub fn score_var(bank: &ReferenceBank, z: &[f64], k: usize) -> Result<VarScore> {
    check_k(bank, k)?;
    let cand = bank.candidate_scores(z)?;
    let best = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let chosen = top_k(&cand, k);
    let d = bank.dim();
    let mut mean = vec![0.0; d];
    for &i in &chosen {
        for (m, v) in mean.iter_mut().zip(bank.features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let ss: f64 = chosen
        .iter()
        .map(|&i| {
            bank.features
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    let raw = (ss / (k - 1) as f64).sqrt();
    let degenerate = raw < VAR_DENOMINATOR_FLOOR;
    let denominator = raw.max(VAR_DENOMINATOR_FLOOR);
    Ok(VarScore {
        score: best / denominator,
        score_cos: best,
        denominator,
        degenerate,
    })
}

/// Scores every row of `queries`.
pub fn score_rows(
    bank: &ReferenceBank,
    queries: &Tensor,
    kind: ScoreKind,
    k: usize,
) -> Result<Vec<f64>> {
    let (_, d) = queries.dims2()?;
    if d != bank.dim() {
        return Err(CclError::dim(
            "score_rows",
            queries.shape(),
            &[bank.len(), bank.dim()],
        ));
    }
    if kind == ScoreKind::Var {
        check_k(bank, k)?;
    }
    par::try_map_range(queries.rows(), |i| {
        let z = queries.row(i);
        match kind {
            ScoreKind::Cos => score_cos(bank, z),
            ScoreKind::Var => score_var(bank, z, k).map(|v| v.score),
        }
    })
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting one half. Computed exactly from mid-ranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(CclError::Contract(
            "AUROC needs non-empty ID and OOD score lists".into(),
        ));
    }
    if id_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(CclError::domain("auroc", "NaN score"));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // doubled mid-ranks keep the arithmetic in integers
    let mut id_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        let ids = all[i..=j].iter().filter(|x| x.1).count() as u128;
        id_rank_sum2 += rank2 * ids;
        i = j + 1;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    let u2 = id_rank_sum2 - n_id * (n_id + 1);
    Ok(u2 as f64 / (2 * n_id * n_ood) as f64)
}
