//! Synthetic ID/OOD data.
//!
//! ID data is a mixture of `C` Gaussian components projected onto the unit
//! sphere. Three OOD sets are derived from it:
//!
//! * `shifted`: the same components with every mean rotated by a fixed angle
//!   towards a direction orthogonal to all ID means,
//! * `scaled`: the ID mixture with inflated covariance,
//! * `interp`: midpoints of samples from two different ID components plus a
//!   little noise (not renormalised).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::DatasetSpec;
use super::rng_stream;
use crate::autodiff::Tensor;
use crate::error::{CclError, Result};

/// A named OOD test set.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub data: Tensor,
}

/// Train/test ID data plus OOD sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub id_train: Tensor,
    pub id_test: Tensor,
    pub ood_sets: Vec<OodSet>,
    /// Generator parameters, as `(key, value)` text.
    pub provenance: Vec<(String, String)>,
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.id_train.cols()
    }

    pub fn ood(&self, name: &str) -> Option<&Tensor> {
        self.ood_sets
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
    }

    /// `(name, data)` for every set, ID first.
    pub fn named_sets(&self) -> Vec<(&str, &Tensor)> {
        let mut v = vec![("id_train", &self.id_train), ("id_test", &self.id_test)];
        v.extend(self.ood_sets.iter().map(|s| (s.name.as_str(), &s.data)));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, t) in self.named_sets() {
            let (r, c) = t.dims2()?;
            if c != d {
                return Err(CclError::Config(format!(
                    "set {name} has {c} columns, expected {d}"
                )));
            }
            if r == 0 {
                return Err(CclError::Config(format!("set {name} is empty")));
            }
        }
        Ok(())
    }

    /// Writes one CSV per set plus `bundle.txt` (set list and provenance).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, t) in self.named_sets() {
            write_set_csv(&dir.join(format!("{name}.csv")), name, t)?;
            let _ = writeln!(manifest, "set = {name}");
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(manifest, "{k} = {v}");
        }
        fs::write(dir.join("bundle.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("bundle.txt"))?;
        let mut sets = Vec::new();
        let mut provenance = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| CclError::Parse {
                what: "bundle manifest",
                detail: line.to_string(),
            })?;
            if k == "set" {
                let (name, t) = read_set_csv(&dir.join(format!("{v}.csv")))?;
                if name != v {
                    return Err(CclError::Parse {
                        what: "dataset csv",
                        detail: format!("{v}.csv declares set {name}"),
                    });
                }
                sets.push((name, t));
            } else {
                provenance.push((k.to_string(), v.to_string()));
            }
        }
        let mut it = sets.into_iter();
        let missing = |w: &str| CclError::Parse {
            what: "bundle manifest",
            detail: format!("missing {w}"),
        };
        let (a, id_train) = it.next().ok_or_else(|| missing("id_train"))?;
        let (b, id_test) = it.next().ok_or_else(|| missing("id_test"))?;
        if a != "id_train" || b != "id_test" {
            return Err(missing("id_train/id_test as the first two sets"));
        }
        let bundle = DatasetBundle {
            id_train,
            id_test,
            ood_sets: it.map(|(name, data)| OodSet { name, data }).collect(),
            provenance,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// CSV with a `set,dims` header line followed by one row per sample.
pub fn write_set_csv(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut s = String::with_capacity(t.len() * 20);
    let _ = writeln!(s, "{name},{}", t.cols());
    for row in t.row_iter() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_set_csv(path: &Path) -> Result<(String, Tensor)> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| CclError::Parse {
        what: "dataset csv",
        detail,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad(format!("{} is empty", path.display())))?;
    let (name, dims) = header
        .split_once(',')
        .ok_or_else(|| bad(format!("header {header:?} is not set,dims")))?;
    let dims: usize = dims
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad dims in {header:?}")))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        if vals.len() != dims {
            return Err(bad(format!(
                "line {} has {} values, expected {dims}",
                n + 2,
                vals.len()
            )));
        }
        data.extend(vals);
        rows += 1;
    }
    Ok((name.to_string(), Tensor::matrix(rows, dims, data)?))
}

pub(crate) fn validate_spec(spec: &DatasetSpec) -> Result<()> {
    let fail = |m: &str| Err(CclError::Config(m.to_string()));
    if spec.dim < 2 || spec.components < 2 {
        return fail("data.dim and data.components must be at least 2");
    }
    if spec.components >= spec.dim {
        return fail(
            "data.components must be below data.dim so shifted means can leave the ID span",
        );
    }
    if spec.train_per_component == 0 || spec.test_per_component == 0 || spec.ood_per_set == 0 {
        return fail("sample counts must be positive");
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) || !(spec.interp_noise >= 0.0) {
        return fail("data.spread and data.interp_noise must be non-negative");
    }
    if !(spec.shift_angle > 0.0 && spec.shift_angle <= std::f64::consts::PI) {
        return fail(
            "data.shift_angle must lie in (0, pi]; 0 makes the shifted set identical to ID",
        );
    }
    if !(spec.scale_factor > 1.0 && spec.scale_factor.is_finite()) {
        return fail("data.scale_factor must exceed 1; 1 makes the scaled set identical to ID");
    }
    if spec.spread == 0.0 {
        return fail(
            "data.spread must be positive; a zero spread makes the scaled set identical to ID",
        );
    }
    Ok(())
}

fn gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `normalize(mean + sd · ε)`, redrawn in the measure-zero case of a zero sum.
fn sphere_sample(mean: &[f64], sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = mean
            .iter()
            .zip(gaussian(mean.len(), rng))
            .map(|(m, e)| m + sd * e)
            .collect();
        if v.iter().any(|x| *x != 0.0) {
            return normalized(v);
        }
    }
}

/// Unit vector orthogonal to every row of `basis` (Gram–Schmidt on a random
/// draw).
fn orthogonal_direction(basis: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let d = basis[0].len();
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut v = b.clone();
        for o in &ortho {
            let p = dot(&v, o);
            v.iter_mut().zip(o).for_each(|(x, y)| *x -= p * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-20 {
            ortho.push(normalized(v));
        }
    }
    loop {
        let mut g = gaussian(d, rng);
        for o in &ortho {
            let p = dot(&g, o);
            g.iter_mut().zip(o).for_each(|(x, y)| *x -= p * y);
        }
        if g.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            return normalized(g);
        }
    }
}

fn stack(rows: Vec<Vec<f64>>, d: usize) -> Tensor {
    let n = rows.len();
    Tensor::matrix(n, d, rows.concat()).expect("rows have length d")
}

/// ID component means used by [`generate_synthetic`] for `seed`.
pub fn component_means(spec: &DatasetSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_stream(seed, 100);
    (0..spec.components)
        .map(|_| normalized(gaussian(spec.dim, &mut rng)))
        .collect()
}

/// Draws a full bundle. Same `(spec, seed)` gives a bit-identical bundle.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<DatasetBundle> {
    validate_spec(spec)?;
    let d = spec.dim;
    let c = spec.components;
    let means = component_means(spec, seed);
    let mut rng: ChaCha8Rng = rng_stream(seed, 101);

    let mixture = |per: usize, sd: f64, centers: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut rows = Vec::with_capacity(per * centers.len());
        for m in centers {
            for _ in 0..per {
                rows.push(sphere_sample(m, sd, rng));
            }
        }
        stack(rows, d)
    };

    let id_train = mixture(spec.train_per_component, spec.spread, &means, &mut rng);
    let id_test = mixture(spec.test_per_component, spec.spread, &means, &mut rng);

    let (sa, ca) = spec.shift_angle.sin_cos();
    let shifted_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let u = orthogonal_direction(&means, &mut rng);
            m.iter().zip(&u).map(|(a, b)| ca * a + sa * b).collect()
        })
        .collect();
    let per_ood = spec.ood_per_set.div_ceil(c);
    let mut shifted = mixture(per_ood, spec.spread, &shifted_means, &mut rng);
    shifted = shifted.select_rows(&(0..spec.ood_per_set).collect::<Vec<_>>());

    let scaled_sd = spec.spread * spec.scale_factor.sqrt();
    let mut scaled = mixture(per_ood, scaled_sd, &means, &mut rng);
    scaled = scaled.select_rows(&(0..spec.ood_per_set).collect::<Vec<_>>());

    let mut interp_rows = Vec::with_capacity(spec.ood_per_set);
    for _ in 0..spec.ood_per_set {
        let a = rng.random_range(0..c);
        let b = (a + rng.random_range(1..c)) % c;
        let xa = sphere_sample(&means[a], spec.spread, &mut rng);
        let xb = sphere_sample(&means[b], spec.spread, &mut rng);
        let noise = gaussian(d, &mut rng);
        interp_rows.push(
            xa.iter()
                .zip(&xb)
                .zip(&noise)
                .map(|((p, q), e)| 0.5 * (p + q) + spec.interp_noise * e)
                .collect(),
        );
    }
    let interp = stack(interp_rows, d);

    let provenance = vec![
        ("seed".to_string(), seed.to_string()),
        ("dim".to_string(), d.to_string()),
        ("components".to_string(), c.to_string()),
        ("spread".to_string(), spec.spread.to_string()),
        ("shifted.angle".to_string(), spec.shift_angle.to_string()),
        (
            "scaled.covariance_factor".to_string(),
            spec.scale_factor.to_string(),
        ),
        ("interp.noise".to_string(), spec.interp_noise.to_string()),
    ];
    Ok(DatasetBundle {
        id_train,
        id_test,
        ood_sets: vec![
            OodSet {
                name: "shifted".into(),
                data: shifted,
            },
            OodSet {
                name: "scaled".into(),
                data: scaled,
            },
            OodSet {
                name: "interp".into(),
                data: interp,
            },
        ],
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = DatasetSpec {
            components: 4,
            train_per_component: 100,
            ..Default::default()
        };
        let a = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a.id_train.shape(), &[400, 16]);
        assert_eq!(a.id_test.rows(), 4 * spec.test_per_component);
        for s in &a.ood_sets {
            assert_eq!(s.data.rows(), spec.ood_per_set);
        }
        let b = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 6).unwrap();
        assert_ne!(a.id_train, c.id_train);
    }

    #[test]
    fn identity_producing_parameters_are_rejected() {
        for spec in [
            DatasetSpec {
                shift_angle: 0.0,
                ..Default::default()
            },
            DatasetSpec {
                scale_factor: 1.0,
                ..Default::default()
            },
            DatasetSpec {
                spread: 0.0,
                ..Default::default()
            },
            DatasetSpec {
                components: 16,
                ..Default::default()
            },
        ] {
            assert!(
                matches!(generate_synthetic(&spec, 0), Err(CclError::Config(_))),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn shifted_means_are_rotated_by_the_angle() {
        let spec = DatasetSpec::default();
        let means = component_means(&spec, 3);
        let mut rng = rng_stream(9, 0);
        let u = orthogonal_direction(&means, &mut rng);
        for m in &means {
            assert!(dot(m, &u).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_synthetic(
            &DatasetSpec {
                train_per_component: 10,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        b.save(dir.path()).unwrap();
        let back = DatasetBundle::load(dir.path()).unwrap();
        assert_eq!(back, b);
    }
}
