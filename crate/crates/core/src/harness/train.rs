//! Two-phase training: self-supervised warm-up, then joint training with the
//! cluster-aware loss and scheduled center refits.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::augment::augment;
use super::config::TrainConfig;
use super::data::DatasetBundle;
use super::evaluate::layer_features;
use super::rng_stream;
use crate::autodiff::{Tape, Var};
use crate::clustering::{assign, should_update, ClusterState, FeatureLayer, UpdateInterval};
use crate::error::{CclError, Result};
use crate::losses::{
    cluster_aware_loss, cluster_center_loss, cluster_instance_loss, self_supervised_loss,
    total_loss,
};
use crate::model::Model;
use crate::scoring::{auroc, score_rows, ReferenceBank, ScoreKind};

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub joint: bool,
    pub lr: f64,
    pub l_self: f64,
    pub l_ccl: Option<f64>,
    pub l_cil: Option<f64>,
    pub l_total: f64,
    pub refit: bool,
    pub probe_auroc: Option<f64>,
}

/// Handed to the observer after every epoch.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub model: &'a Model,
    pub clusters: Option<&'a ClusterState>,
    pub metrics: &'a EpochMetrics,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub clusters: Option<ClusterState>,
    pub metrics: Vec<EpochMetrics>,
    /// Epochs at whose start the centers were refit.
    pub refit_epochs: Vec<usize>,
    /// Total number of refits, including per-batch ones.
    pub refit_count: usize,
}

struct StepLosses {
    total: f64,
    l_self: f64,
    l_ccl: Option<f64>,
    l_cil: Option<f64>,
}

/// Stream ids for the run's independent random generators.
const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_KMEANS: u64 = 3;

pub fn train(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    train_with_observer(config, bundle, |_| {})
}

/// [`train`], calling `observer` at the end of every epoch.
pub fn train_with_observer(
    config: &TrainConfig,
    bundle: &DatasetBundle,
    mut observer: impl FnMut(&EpochEnd<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    bundle.validate()?;
    if bundle.dim() != config.widths.input_dim() {
        return Err(CclError::Config(format!(
            "bundle dimension {} differs from encoder input {}",
            bundle.dim(),
            config.widths.input_dim()
        )));
    }
    let schedule = config.schedule()?;
    let cluster_params = config.cluster_params();
    let mut model = Model::init(
        rng_stream(config.seed, STREAM_INIT).random(),
        &config.widths,
    )?;
    let mut batch_rng = rng_stream(config.seed, STREAM_BATCHES);
    let mut kmeans_rng = rng_stream(config.seed, STREAM_KMEANS);

    let m = bundle.id_train.rows();
    let n = config.batch_size;
    let mut order: Vec<usize> = (0..m).collect();
    let mut clusters: Option<ClusterState> = None;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut refit_epochs = Vec::new();
    let mut refit_count = 0;

    let refit = |model: &Model, epoch: usize, rng_seed: u64| -> Result<ClusterState> {
        let feats = layer_features(model, &bundle.id_train, config.clustering_layer)?;
        ClusterState::fit(
            &feats,
            &cluster_params,
            rng_seed,
            config.clustering_layer,
            epoch,
        )
        .map_err(|e| CclError::Numeric(format!("cluster refit failed at epoch {epoch}: {e}")))
    };

    for epoch in 0..config.epochs {
        let joint = schedule.is_joint(epoch) && config.clustering_enabled();
        let lr = config.learning_rate(epoch);
        let refit_now = config.clustering_enabled() && should_update(epoch, &schedule);
        if refit_now {
            clusters = Some(refit(&model, epoch, kmeans_rng.random())?);
            refit_epochs.push(epoch);
            refit_count += 1;
        }

        order.shuffle(&mut batch_rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, idx) in order.chunks(n).enumerate() {
            if idx.len() < n {
                continue;
            }
            if joint && config.update_interval == UpdateInterval::EveryBatch && b > 0 {
                clusters = Some(refit(&model, epoch, kmeans_rng.random())?);
                refit_count += 1;
            }
            let views = augment(
                &bundle.id_train.select_rows(idx),
                &config.augment,
                &mut batch_rng,
            );
            let state = if joint { clusters.as_ref() } else { None };
            let step = train_step(&mut model, config, &views, state, lr).map_err(|e| match e {
                CclError::Numeric(msg) => {
                    CclError::Numeric(format!("epoch {epoch}, batch {b}: {msg}"))
                }
                CclError::Domain { op, detail } => CclError::Numeric(format!(
                    "epoch {epoch}, batch {b}: domain error in {op}: {detail}"
                )),
                other => other,
            })?;
            sums.0 += step.total;
            sums.1 += step.l_self;
            sums.2 += step.l_ccl.unwrap_or(0.0);
            sums.3 += step.l_cil.unwrap_or(0.0);
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let probe_auroc = if config.probe_every > 0 && (epoch + 1) % config.probe_every == 0 {
            Some(probe(&model, bundle, config)?)
        } else {
            None
        };
        let row = EpochMetrics {
            epoch,
            joint,
            lr,
            l_self: sums.1 / denom,
            l_ccl: (joint && config.use_ccl).then_some(sums.2 / denom),
            l_cil: (joint && config.use_cil).then_some(sums.3 / denom),
            l_total: sums.0 / denom,
            refit: refit_now,
            probe_auroc,
        };
        observer(&EpochEnd {
            epoch,
            model: &model,
            clusters: clusters.as_ref(),
            metrics: &row,
        });
        metrics.push(row);
    }

    Ok(TrainOutcome {
        model,
        clusters,
        metrics,
        refit_epochs,
        refit_count,
    })
}

/// One SGD step on a batch of `2N` views. With `clusters` present the
/// cluster-aware loss is added; otherwise only the self-supervised loss is
/// minimised.
fn train_step(
    model: &mut Model,
    config: &TrainConfig,
    views: &crate::autodiff::Tensor,
    clusters: Option<&ClusterState>,
    lr: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.constant(views.clone());
    let h = model.encode(&mut tape, &vars, x)?;
    let z = model.project(&mut tape, &vars, h)?;
    let l_self = self_supervised_loss(&mut tape, z, config.loss.tau)?;

    let (loss, l_ccl, l_cil) = match clusters {
        None => (l_self, None, None),
        Some(state) => {
            let feats = match config.clustering_layer {
                FeatureLayer::Embedding => h,
                FeatureLayer::Projection => z,
            };
            let (l_cluster, ccl, cil) = cluster_terms(&mut tape, config, state, feats)?;
            let total = total_loss(&mut tape, l_self, l_cluster, config.loss.lambda_weight)?;
            (total, ccl, cil)
        }
    };

    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(CclError::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    model.sgd_step(&vars, &grads, lr);
    if !model.is_finite() {
        return Err(CclError::Numeric("parameters became non-finite".into()));
    }
    let l_self_v = tape.scalar(l_self)?;
    Ok(StepLosses {
        total: value,
        l_self: l_self_v,
        l_ccl,
        l_cil,
    })
}

/// Mean of the enabled cluster-aware terms, plus their values.
fn cluster_terms(
    tape: &mut Tape,
    config: &TrainConfig,
    state: &ClusterState,
    feats: Var,
) -> Result<(Var, Option<f64>, Option<f64>)> {
    let assignments = assign(tape.value(feats), &state.centers)?;
    let ccl = if config.use_ccl {
        Some(cluster_center_loss(
            tape,
            feats,
            &state.centers,
            &assignments,
            &state.phis,
            config.loss.denominator_includes_positive,
        )?)
    } else {
        None
    };
    let cil = if config.use_cil {
        Some(cluster_instance_loss(tape, feats, &assignments, config.loss.tau)?.loss)
    } else {
        None
    };
    let ccl_v = ccl.map(|v| tape.scalar(v)).transpose()?;
    let cil_v = cil.map(|v| tape.scalar(v)).transpose()?;
    let combined = match (ccl, cil) {
        (Some(a), Some(b)) => cluster_aware_loss(tape, a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(CclError::Contract("no cluster-aware term enabled".into())),
    };
    Ok((combined, ccl_v, cil_v))
}

/// AUROC of the configured score on the first OOD set.
fn probe(model: &Model, bundle: &DatasetBundle, config: &TrainConfig) -> Result<f64> {
    let Some(ood) = bundle.ood_sets.first() else {
        return Ok(f64::NAN);
    };
    let bank = ReferenceBank::new(layer_features(model, &bundle.id_train, config.score_layer)?)?;
    let id = score_rows(
        &bank,
        &layer_features(model, &bundle.id_test, config.score_layer)?,
        ScoreKind::Cos,
        config.k_top,
    )?;
    let od = score_rows(
        &bank,
        &layer_features(model, &ood.data, config.score_layer)?,
        ScoreKind::Cos,
        config.k_top,
    )?;
    auroc(&id, &od)
}

/// Writes the per-epoch log as CSV; every row carries the config hash.
pub fn write_metrics_csv(
    path: &Path,
    config: &TrainConfig,
    metrics: &[EpochMetrics],
) -> Result<()> {
    let hash = config.short_hash();
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s =
        String::from("config_hash,epoch,phase,lr,l_self,l_ccl,l_cil,l_total,refit,probe_auroc\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{hash},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            if m.joint { "joint" } else { "warmup" },
            m.lr,
            m.l_self,
            opt(m.l_ccl),
            opt(m.l_cil),
            m.l_total,
            m.refit,
            opt(m.probe_auroc)
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}
