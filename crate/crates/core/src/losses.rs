//! Contrastive losses: NT-Xent and the self-supervised loss over augmented
//! pairs, the cluster center loss with adaptive per-cluster concentrations,
//! the cluster instance loss, and their combinations.
//!
//! Every similarity is cosine, so all losses are invariant to positive
//! rescaling of their feature rows. Rows `2k` and `2k + 1` (zero-based) of a
//! batch are the two views of source sample `k`.

use std::rc::Rc;

use crate::autodiff::{Mask, Tape, Tensor, Var};
use crate::error::{CclError, Result};

/// Hyperparameters shared by the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHyperparams {
    /// Temperature of the instance-level losses.
    pub tau: f64,
    /// Smoothing term in the concentration estimate.
    pub alpha: f64,
    /// Weight of the cluster-aware loss in the total.
    pub lambda_weight: f64,
    /// Lower clamp for concentrations.
    pub phi_floor: f64,
    /// Keep the positive center in the cluster center loss denominator
    /// (conventional InfoNCE) instead of excluding it.
    pub denominator_includes_positive: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        LossHyperparams {
            tau: 0.5,
            alpha: 10.0,
            lambda_weight: 0.5,
            phi_floor: 0.05,
            denominator_includes_positive: false,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CclError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CclError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_weight) {
            return Err(CclError::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda_weight
            )));
        }
        if !(self.phi_floor > 0.0 && self.phi_floor.is_finite()) {
            return Err(CclError::Config(format!(
                "phi_floor must be positive, got {}",
                self.phi_floor
            )));
        }
        Ok(())
    }
}

/// Index of the other view of row `i`.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CclError::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Log-softmax over all other rows of the scaled self-similarity matrix.
fn self_log_softmax(tape: &mut Tape, x: Var, tau: f64) -> Result<Var> {
    let n = tape.value(x).dims2()?.0;
    let sim = tape.cosine_similarity(x, x)?;
    let logits = tape.scale(sim, 1.0 / tau);
    tape.masked_log_softmax(logits, Rc::new(Mask::off_diagonal(n)))
}

/// `-Σ w ⊙ log_softmax / count` with constant weights.
fn weighted_nll(tape: &mut Tape, log_probs: Var, weights: Tensor, count: f64) -> Result<Var> {
    let w = tape.constant(weights);
    let picked = tape.mul(log_probs, w)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / count))
}

/// NT-Xent term `ℓ(i, j)`: negative log of the softmax weight of `j` among all
/// rows `k ≠ i`, with logits `s(z_i, z_k) / τ`.
pub fn nt_xent_pair(tape: &mut Tape, z: Var, i: usize, j: usize, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.value(z).dims2()?.0;
    if i == j || i >= n || j >= n {
        return Err(CclError::Contract(format!(
            "nt_xent_pair needs distinct indices below {n}, got ({i}, {j})"
        )));
    }
    let ls = self_log_softmax(tape, z, tau)?;
    let mut w = Tensor::zeros(&[n, n]);
    w.data_mut()[i * n + j] = 1.0;
    weighted_nll(tape, ls, w, 1.0)
}

/// Mean of `ℓ(2k, 2k+1) + ℓ(2k+1, 2k)` over the `2N` rows.
pub fn self_supervised_loss(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.value(z).dims2()?.0;
    if n < 2 || n % 2 != 0 {
        return Err(CclError::Contract(format!(
            "self-supervised loss needs an even number (>= 2) of rows, got {n}"
        )));
    }
    let ls = self_log_softmax(tape, z, tau)?;
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        w.data_mut()[i * n + partner(i)] = 1.0;
    }
    weighted_nll(tape, ls, w, n as f64)
}

/// Concentration of one cluster:
/// `max(Σ_t ‖h_t − c‖ / (T · ln(T + α)), floor)`.
pub fn concentration(members: &Tensor, center: &[f64], alpha: f64, floor: f64) -> Result<f64> {
    let (t, d) = members.dims2()?;
    if t == 0 {
        return Err(CclError::Contract(
            "concentration of an empty cluster".into(),
        ));
    }
    if d != center.len() {
        return Err(CclError::dim(
            "concentration",
            members.shape(),
            &[center.len()],
        ));
    }
    let total: f64 = members
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    let tf = t as f64;
    Ok((total / (tf * (tf + alpha).ln())).max(floor))
}

fn check_assignments(assignments: &[usize], rows: usize, r: usize) -> Result<()> {
    if assignments.len() != rows {
        return Err(CclError::dim("assignments", &[rows], &[assignments.len()]));
    }
    if let Some((i, &a)) = assignments.iter().enumerate().find(|(_, &a)| a >= r) {
        return Err(CclError::Contract(format!(
            "assignment {a} of row {i} is outside 0..{r}"
        )));
    }
    Ok(())
}

/// Cluster center loss.
///
/// For every row, `-log(exp(s(h_i, c_{a_i}) / φ_{a_i}) / Σ_{j ≠ a_i} exp(s(h_i, c_j) / φ_j))`,
/// averaged over rows. The positive center is left out of the denominator
/// unless `include_positive` is set, so the value can be negative. Centers
/// and concentrations are constants.
pub fn cluster_center_loss(
    tape: &mut Tape,
    h: Var,
    centers: &Tensor,
    assignments: &[usize],
    phis: &[f64],
    include_positive: bool,
) -> Result<Var> {
    let (n, d) = tape.value(h).dims2()?;
    let (r, dc) = centers.dims2()?;
    if r < 2 {
        return Err(CclError::Config(format!(
            "cluster center loss needs at least 2 centers, got {r}"
        )));
    }
    if d != dc {
        return Err(CclError::dim(
            "cluster_center_loss",
            tape.shape(h),
            centers.shape(),
        ));
    }
    if phis.len() != r {
        return Err(CclError::dim("concentrations", &[r], &[phis.len()]));
    }
    if let Some(p) = phis.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(CclError::Contract(format!(
            "concentration {p} is not positive"
        )));
    }
    check_assignments(assignments, n, r)?;

    let c = tape.constant(centers.clone());
    let sim = tape.cosine_similarity(h, c)?;
    let mut inv = Tensor::zeros(&[n, r]);
    let mut onehot = Tensor::zeros(&[n, r]);
    for i in 0..n {
        for j in 0..r {
            inv.data_mut()[i * r + j] = 1.0 / phis[j];
        }
        onehot.data_mut()[i * r + assignments[i]] = 1.0;
    }
    let inv = tape.constant(inv);
    let logits = tape.mul(sim, inv)?;
    let mask = Mask::from_fn(n, r, |i, j| include_positive || j != assignments[i]);
    let lse = tape.masked_logsumexp(logits, Rc::new(mask))?;
    let lse_total = tape.sum_all(lse);
    let onehot = tape.constant(onehot);
    let pos = tape.mul(logits, onehot)?;
    let pos_total = tape.sum_all(pos);
    let diff = tape.sub(lse_total, pos_total)?;
    Ok(tape.scale(diff, 1.0 / n as f64))
}

/// Result of [`cluster_instance_loss`].
#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    pub loss: Var,
    /// Rows with at least one same-cluster partner. Zero means the loss is a
    /// vacuous 0 (every row alone in its cluster).
    pub anchors: usize,
}

impl InstanceLoss {
    pub fn is_vacuous(&self) -> bool {
        self.anchors == 0
    }
}

/// Cluster instance loss: a SupCon-style loss whose positives are the other
/// rows in the same cluster. Rows without positives are skipped and not
/// counted in the mean.
pub fn cluster_instance_loss(
    tape: &mut Tape,
    h: Var,
    assignments: &[usize],
    tau: f64,
) -> Result<InstanceLoss> {
    check_tau(tau)?;
    let n = tape.value(h).dims2()?.0;
    if n < 2 {
        return Err(CclError::Contract(format!(
            "cluster instance loss needs at least 2 rows, got {n}"
        )));
    }
    check_assignments(assignments, n, usize::MAX)?;

    let mut w = Tensor::zeros(&[n, n]);
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != i && assignments[p] == assignments[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        for p in &pos {
            w.data_mut()[i * n + p] = 1.0 / pos.len() as f64;
        }
    }
    if anchors == 0 {
        log::warn!("cluster instance loss: every row is alone in its cluster");
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(InstanceLoss { loss, anchors });
    }
    let ls = self_log_softmax(tape, h, tau)?;
    let loss = weighted_nll(tape, ls, w, anchors as f64)?;
    Ok(InstanceLoss { loss, anchors })
}

/// Mean of the cluster center and cluster instance losses.
pub fn cluster_aware_loss(tape: &mut Tape, l_ccl: Var, l_cil: Var) -> Result<Var> {
    let s = tape.add(l_ccl, l_cil)?;
    Ok(tape.scale(s, 0.5))
}

/// `(1 − λ)·L_self + λ·L_cluster`.
pub fn total_loss(tape: &mut Tape, l_self: Var, l_cluster: Var, lambda_weight: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_weight) {
        return Err(CclError::Config(format!(
            "lambda must lie in [0, 1], got {lambda_weight}"
        )));
    }
    let a = tape.scale(l_self, 1.0 - lambda_weight);
    let b = tape.scale(l_cluster, lambda_weight);
    tape.add(a, b)
}
