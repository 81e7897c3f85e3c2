//! Named ablation sweeps. Every variant is a list of config overrides on top
//! of a base config, so each table row is reproducible from the command line
//! as well.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::config::TrainConfig;
use super::data::generate_synthetic;
use super::evaluate::{evaluate, layer_features};
use super::train::train;
use crate::clustering::max_similarities;
use crate::error::{CclError, Result};
use crate::par;
use crate::scoring::ScoreKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// Loss ablation: self-only, +center, +instance, all.
    Losses,
    /// Clustering on the embedding vs the projection layer.
    Layer,
    /// Warm-up on/off and refit interval.
    Update,
    /// Number of centers.
    Centers,
    /// Full model scored with both score functions.
    Scores,
}

impl FromStr for Sweep {
    type Err = CclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" | "table2" => Ok(Sweep::Losses),
            "layer" | "table3" => Ok(Sweep::Layer),
            "update" | "table4" => Ok(Sweep::Update),
            "centers" | "table5" => Ok(Sweep::Centers),
            "scores" => Ok(Sweep::Scores),
            other => Err(CclError::Config(format!(
                "unknown sweep {other:?} (losses, layer, update, centers, scores)"
            ))),
        }
    }
}

/// One configuration in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    fn new(name: &str, overrides: &[&str]) -> Self {
        Variant {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// `base` with this variant's overrides and the given seed.
    pub fn config(&self, base: &TrainConfig, seed: u64) -> Result<TrainConfig> {
        let mut c = base.clone();
        c.seed = seed;
        c.apply_overrides(&self.overrides)?;
        c.validate()?;
        Ok(c)
    }
}

/// Variants of `sweep`; the full model is always the base config unchanged.
pub fn variants(sweep: Sweep, base: &TrainConfig) -> Vec<Variant> {
    let c = base.data.components;
    match sweep {
        Sweep::Losses => vec![
            Variant::new("self", &["use_ccl=false", "use_cil=false"]),
            Variant::new("self+ccl", &["use_ccl=true", "use_cil=false"]),
            Variant::new("self+cil", &["use_ccl=false", "use_cil=true"]),
            Variant::new("full", &["use_ccl=true", "use_cil=true"]),
        ],
        Sweep::Layer => vec![
            Variant::new("projection", &["clustering_layer=projection"]),
            Variant::new("embedding", &["clustering_layer=embedding"]),
        ],
        Sweep::Update => {
            // Dropping the warm-up stage keeps the joint phase as long as in
            // the base run rather than handing it the warm-up epochs.
            let joint = base.epochs - base.warmup_epochs.min(base.epochs);
            vec![
                Variant {
                    name: "u10-nowarmup".into(),
                    overrides: vec![
                        "update_interval=10".into(),
                        "warmup_epochs=0".into(),
                        format!("epochs={}", joint.max(1)),
                    ],
                },
                Variant::new("u10", &["update_interval=10"]),
                Variant::new("batch", &["update_interval=batch"]),
                Variant::new("u1", &["update_interval=1"]),
                Variant::new("u50", &["update_interval=50"]),
            ]
        }
        Sweep::Centers => [(c / 2).max(2), c, 5 * c]
            .iter()
            .map(|r| Variant {
                name: format!("R={r}"),
                overrides: vec![format!("clusters={r}")],
            })
            .collect(),
        Sweep::Scores => vec![Variant::new("full", &[])],
    }
}

/// Outcome of one training + evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// `(ood set, score kind) → AUROC`.
    pub auroc: BTreeMap<(String, String), f64>,
    /// Mean over ID test samples of the maximum cosine similarity to any
    /// final center, at the clustering layer.
    pub center_similarity: Option<f64>,
}

impl RunResult {
    pub fn get(&self, set: &str, kind: ScoreKind) -> Option<f64> {
        self.auroc
            .get(&(set.to_string(), kind.to_string()))
            .copied()
    }
}

/// Trains and evaluates one config on data generated from its own seed.
pub fn run_config(variant: &str, config: &TrainConfig) -> Result<RunResult> {
    let bundle = generate_synthetic(&config.data, config.seed)?;
    let out = train(config, &bundle)?;
    let hash = config.short_hash();
    let mut auroc = BTreeMap::new();
    for kind in [ScoreKind::Cos, ScoreKind::Var] {
        let report = evaluate(
            &out.model,
            &bundle,
            kind,
            config.k_top,
            config.score_layer,
            &hash,
        )?;
        for o in report.ood {
            auroc.insert((o.name, kind.to_string()), o.auroc);
        }
    }
    let center_similarity = match &out.clusters {
        Some(state) => {
            let feats = layer_features(&out.model, &bundle.id_test, state.layer)?;
            let sims = max_similarities(&feats, &state.centers)?;
            Some(sims.iter().sum::<f64>() / sims.len() as f64)
        }
        None => None,
    };
    Ok(RunResult {
        variant: variant.to_string(),
        seed: config.seed,
        config_hash: hash,
        auroc,
        center_similarity,
    })
}

/// Results of a whole sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub variants: Vec<String>,
    pub runs: Vec<RunResult>,
}

impl SweepResult {
    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Mean AUROC of a variant over seeds.
    pub fn mean_auroc(&self, variant: &str, set: &str, kind: ScoreKind) -> Option<f64> {
        let v: Vec<f64> = self
            .runs_of(variant)
            .filter_map(|r| r.get(set, kind))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_center_similarity(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .runs_of(variant)
            .filter_map(|r| r.center_similarity)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn sets(&self) -> Vec<(String, String)> {
        let mut keys: Vec<_> = self
            .runs
            .iter()
            .flat_map(|r| r.auroc.keys().cloned())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// One row per run and `(set, kind)`.
    pub fn runs_csv(&self) -> String {
        let mut s =
            String::from("variant,seed,config_hash,ood_set,score_kind,auroc,center_similarity\n");
        for r in &self.runs {
            let sim = r.center_similarity.map_or(String::new(), |v| v.to_string());
            for ((set, kind), a) in &r.auroc {
                let _ = writeln!(
                    s,
                    "{},{},{},{set},{kind},{a},{sim}",
                    r.variant, r.seed, r.config_hash
                );
            }
        }
        s
    }

    /// Mean over seeds per variant and `(set, kind)`.
    pub fn summary_csv(&self) -> String {
        let mut s =
            String::from("variant,ood_set,score_kind,mean_auroc,seeds,mean_center_similarity\n");
        for v in &self.variants {
            let seeds = self.runs_of(v).count();
            let sim = self
                .mean_center_similarity(v)
                .map_or(String::new(), |x| x.to_string());
            for (set, kind) in self.sets() {
                let k: ScoreKind = kind.parse().expect("known kind");
                if let Some(m) = self.mean_auroc(v, &set, k) {
                    let _ = writeln!(s, "{v},{set},{kind},{m},{seeds},{sim}");
                }
            }
        }
        s
    }

    /// Plain-text table of mean AUROC for one score kind.
    pub fn table(&self, kind: ScoreKind) -> String {
        let sets: Vec<String> = {
            let mut v: Vec<String> = self.sets().into_iter().map(|(s, _)| s).collect();
            v.dedup();
            v
        };
        let mut s = format!("{:<16}", "variant");
        for set in &sets {
            let _ = write!(s, "{set:>10}");
        }
        s.push_str(&format!("{:>10}\n", "sim"));
        for v in &self.variants {
            let _ = write!(s, "{v:<16}");
            for set in &sets {
                let m = self.mean_auroc(v, set, kind).unwrap_or(f64::NAN);
                let _ = write!(s, "{m:>10.4}");
            }
            let sim = self.mean_center_similarity(v).unwrap_or(f64::NAN);
            let _ = writeln!(s, "{sim:>10.4}");
        }
        s
    }
}

/// Runs `variants × seeds`, in parallel across runs when available.
pub fn run_variants(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<SweepResult> {
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let configs = jobs
        .iter()
        .map(|&(v, s)| variants[v].config(base, s))
        .collect::<Result<Vec<_>>>()?;
    let runs = par::try_map_range(jobs.len(), |i| {
        run_config(&variants[jobs[i].0].name, &configs[i])
    })?;
    Ok(SweepResult {
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        runs,
    })
}

pub fn run_sweep(base: &TrainConfig, sweep: Sweep, seeds: &[u64]) -> Result<SweepResult> {
    run_variants(base, &variants(sweep, base), seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_names() {
        assert_eq!("table2".parse::<Sweep>().unwrap(), Sweep::Losses);
        assert_eq!("centers".parse::<Sweep>().unwrap(), Sweep::Centers);
        assert!("table9".parse::<Sweep>().is_err());
    }

    #[test]
    fn every_variant_is_a_valid_config() {
        let base = TrainConfig::default();
        for sweep in [
            Sweep::Losses,
            Sweep::Layer,
            Sweep::Update,
            Sweep::Centers,
            Sweep::Scores,
        ] {
            for v in variants(sweep, &base) {
                v.config(&base, 3).unwrap();
            }
        }
        let names: Vec<_> = variants(Sweep::Centers, &base)
            .into_iter()
            .map(|v| v.name)
            .collect();
        assert_eq!(names, vec!["R=2", "R=4", "R=20"]);
    }
}
