use std::fmt::Write as _;
use std::path::Path;

use super::data::DatasetBundle;
use crate::autodiff::Tensor;
use crate::clustering::FeatureLayer;
use crate::error::{CclError, Result};
use crate::model::Model;
use crate::scoring::{auroc, score_rows, ReferenceBank, ScoreKind};

/// Features of `x` at the requested layer, without gradient tracking.
pub fn layer_features(model: &Model, x: &Tensor, layer: FeatureLayer) -> Result<Tensor> {
    let h = model.encode_values(x)?;
    match layer {
        FeatureLayer::Embedding => Ok(h),
        FeatureLayer::Projection => model.project_values(&h),
    }
}

/// Scores and AUROC of one OOD set.
#[derive(Clone, Debug, PartialEq)]
pub struct OodResult {
    pub name: String,
    pub scores: Vec<f64>,
    pub auroc: f64,
}

/// Scores of the ID test set and every OOD set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub score_kind: ScoreKind,
    pub k_top: usize,
    pub layer: FeatureLayer,
    pub config_hash: String,
    pub id_scores: Vec<f64>,
    pub ood: Vec<OodResult>,
}

impl ScoreReport {
    pub fn auroc(&self, set: &str) -> Option<f64> {
        self.ood.iter().find(|o| o.name == set).map(|o| o.auroc)
    }

    /// `set,sample,score`, ID test rows first, then each OOD set in order.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("set,sample,score\n");
        let sets = std::iter::once(("id_test", &self.id_scores))
            .chain(self.ood.iter().map(|o| (o.name.as_str(), &o.scores)));
        for (name, scores) in sets {
            for (i, v) in scores.iter().enumerate() {
                let _ = writeln!(s, "{name},{i},{v}");
            }
        }
        s
    }

    /// `score_kind,k,layer,ood_set,auroc,config_hash`, one row per OOD set.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("score_kind,k,layer,ood_set,auroc,config_hash\n");
        for o in &self.ood {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.score_kind, self.k_top, self.layer, o.name, o.auroc, self.config_hash
            );
        }
        s
    }

    /// Writes `scores.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores.csv"), self.scores_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

/// Builds the reference bank from un-augmented `id_train` features, scores
/// `id_test` and every OOD set, and computes AUROC per OOD set.
pub fn evaluate(
    model: &Model,
    bundle: &DatasetBundle,
    kind: ScoreKind,
    k_top: usize,
    layer: FeatureLayer,
    config_hash: &str,
) -> Result<ScoreReport> {
    if bundle.dim() != model.encoder.input_dim() {
        return Err(CclError::Config(format!(
            "bundle dimension {} differs from model input {}",
            bundle.dim(),
            model.encoder.input_dim()
        )));
    }
    let bank = ReferenceBank::new(layer_features(model, &bundle.id_train, layer)?)?;
    let score = |x: &Tensor| -> Result<Vec<f64>> {
        score_rows(&bank, &layer_features(model, x, layer)?, kind, k_top)
    };
    let id_scores = score(&bundle.id_test)?;
    let ood = bundle
        .ood_sets
        .iter()
        .map(|set| {
            let scores = score(&set.data)?;
            let a = auroc(&id_scores, &scores)?;
            Ok(OodResult {
                name: set.name.clone(),
                scores,
                auroc: a,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport {
        score_kind: kind,
        k_top,
        layer,
        config_hash: config_hash.to_string(),
        id_scores,
        ood,
    })
}

/// `set,index,f0,…` rows of the chosen layer's features for every set.
pub fn export_embeddings_csv(
    model: &Model,
    bundle: &DatasetBundle,
    layer: FeatureLayer,
) -> Result<String> {
    let width = match layer {
        FeatureLayer::Embedding => model.encoder.output_dim(),
        FeatureLayer::Projection => model.projection.output_dim(),
    };
    let mut s = String::from("set,index");
    for j in 0..width {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (name, x) in bundle.named_sets() {
        let f = layer_features(model, x, layer)?;
        for (i, row) in f.row_iter().enumerate() {
            let _ = write!(s, "{name},{i}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

/// Writes [`export_embeddings_csv`] to `path`.
pub fn export_embeddings(
    model: &Model,
    bundle: &DatasetBundle,
    layer: FeatureLayer,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, export_embeddings_csv(model, bundle, layer)?)?;
    Ok(())
}
