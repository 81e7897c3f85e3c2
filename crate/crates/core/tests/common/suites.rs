//! Oracle and finite-difference checks over many seeded instances. Each check
//! reports its worst disagreement so tests can assert on it and the
//! acceptance runner can print it.

use ccl::autodiff::{finite_difference_check, Tape, Tensor, Var};
use ccl::clustering::assign;
use ccl::losses::{
    cluster_aware_loss, cluster_center_loss, cluster_instance_loss, concentration, nt_xent_pair,
    self_supervised_loss, total_loss,
};
use ccl::scoring::{self, ReferenceBank};
use ccl::Result;
use rand::Rng;

use super::{instance, oracle, random_rows, rng, tensor, Instance, Rows};

pub const ORACLE_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest error over a check and the instance where it occurred.
#[derive(Clone, Copy, Debug, Default)]
pub struct Worst {
    pub error: f64,
    pub instance: u64,
    pub instances: u64,
}

impl Worst {
    fn over(instances: u64, mut err: impl FnMut(u64) -> f64) -> Worst {
        let mut w = Worst {
            instances,
            ..Worst::default()
        };
        for seed in 0..instances {
            let e = err(seed);
            if e.is_nan() || e > w.error {
                w.error = if e.is_nan() { f64::INFINITY } else { e };
                w.instance = seed;
            }
        }
        w
    }
}

pub type Check = fn(u64) -> Worst;

fn tape_value(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.scalar(v).unwrap()
}

fn random_pair(seed: u64, n: usize) -> (usize, usize) {
    let mut r = rng(seed + 10_000);
    let i = r.random_range(0..n);
    (i, (i + r.random_range(1..n)) % n)
}

pub fn oracle_nt_xent(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        let (i, j) = random_pair(seed, inst.features.len());
        let got = tape_value(|t| {
            let z = t.leaf(tensor(&inst.features));
            nt_xent_pair(t, z, i, j, inst.tau).unwrap()
        });
        (got - oracle::nt_xent(&inst.features, i, j, inst.tau)).abs()
    })
}

pub fn oracle_self(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        let got = tape_value(|t| {
            let z = t.leaf(tensor(&inst.features));
            self_supervised_loss(t, z, inst.tau).unwrap()
        });
        (got - oracle::l_self(&inst.features, inst.tau)).abs()
    })
}

fn center(inst: &Instance, t: &mut Tape, h: Var, include_positive: bool) -> Result<Var> {
    cluster_center_loss(
        t,
        h,
        &tensor(&inst.centers),
        &inst.assignments,
        &inst.phis,
        include_positive,
    )
}

pub fn oracle_center(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        [false, true]
            .into_iter()
            .map(|pos| {
                let got = tape_value(|t| {
                    let h = t.leaf(tensor(&inst.features));
                    center(&inst, t, h, pos).unwrap()
                });
                let want = oracle::l_ccl(
                    &inst.features,
                    &inst.centers,
                    &inst.assignments,
                    &inst.phis,
                    pos,
                );
                (got - want).abs()
            })
            .fold(0.0, f64::max)
    })
}

pub fn oracle_instance(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        let got = tape_value(|t| {
            let h = t.leaf(tensor(&inst.features));
            cluster_instance_loss(t, h, &inst.assignments, inst.tau)
                .unwrap()
                .loss
        });
        (got - oracle::l_cil(&inst.features, &inst.assignments, inst.tau)).abs()
    })
}

/// Cluster-aware and total losses, both checked per instance.
pub fn oracle_combined(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        let lambda = rng(seed + 20_000).random_range(0.0..=1.0);
        let mut t = Tape::new();
        let h = t.leaf(tensor(&inst.features));
        let ccl = center(&inst, &mut t, h, false).unwrap();
        let cil = cluster_instance_loss(&mut t, h, &inst.assignments, inst.tau).unwrap();
        let cluster = cluster_aware_loss(&mut t, ccl, cil.loss).unwrap();
        let s = self_supervised_loss(&mut t, h, inst.tau).unwrap();
        let total = total_loss(&mut t, s, cluster, lambda).unwrap();

        let want_cluster = 0.5
            * (oracle::l_ccl(
                &inst.features,
                &inst.centers,
                &inst.assignments,
                &inst.phis,
                false,
            ) + oracle::l_cil(&inst.features, &inst.assignments, inst.tau));
        let want_total =
            (1.0 - lambda) * oracle::l_self(&inst.features, inst.tau) + lambda * want_cluster;
        (t.scalar(cluster).unwrap() - want_cluster)
            .abs()
            .max((t.scalar(total).unwrap() - want_total).abs())
    })
}

pub fn oracle_concentration(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let mut r = rng(seed);
        let t = r.random_range(1..20);
        let d = r.random_range(2..=16);
        let members = random_rows(&mut r, t, d);
        let c = random_rows(&mut r, 1, d).remove(0);
        let alpha = r.random_range(0.5..20.0);
        let floor = r.random_range(0.01..0.5);
        let got = concentration(&tensor(&members), &c, alpha, floor).unwrap();
        (got - oracle::phi(&members, &c, alpha, floor)).abs()
    })
}

/// Number of points assigned differently from the oracle.
pub fn oracle_assign(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..40);
        let k = r.random_range(1..8);
        let d = r.random_range(2..=16);
        let points = random_rows(&mut r, n, d);
        let centers = random_rows(&mut r, k, d);
        let got = assign(&tensor(&points), &tensor(&centers)).unwrap();
        let want = oracle::nearest(&points, &centers);
        got.iter().zip(&want).filter(|(a, b)| a != b).count() as f64
    })
}

fn bank_instance(seed: u64) -> (Rows, Vec<f64>, usize) {
    let mut r = rng(seed);
    let m = r.random_range(2..30);
    let d = r.random_range(2..=16);
    let bank: Rows = random_rows(&mut r, m, d)
        .into_iter()
        .map(|row| {
            let s = r.random_range(0.2..3.0);
            row.into_iter().map(|x| x * s).collect()
        })
        .collect();
    let z = random_rows(&mut r, 1, d).remove(0);
    let k = r.random_range(2..=m);
    (bank, z, k)
}

pub fn oracle_score_cos(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let (rows, z, _) = bank_instance(seed);
        let bank = ReferenceBank::new(tensor(&rows)).unwrap();
        (scoring::score_cos(&bank, &z).unwrap() - oracle::score_cos(&rows, &z)).abs()
    })
}

pub fn oracle_score_var(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let (rows, z, k) = bank_instance(seed);
        let bank = ReferenceBank::new(tensor(&rows)).unwrap();
        (scoring::score_var(&bank, &z, k).unwrap().score - oracle::score_var(&rows, &z, k)).abs()
    })
}

/// Scores on a coarse grid, so ties are frequent.
pub fn oracle_auroc(instances: u64) -> Worst {
    Worst::over(instances, |seed| {
        let mut r = rng(seed);
        let levels = r.random_range(2..12);
        let mut draw = |n: usize, shift: i32| -> Vec<f64> {
            (0..n)
                .map(|_| (r.random_range(0..levels) as i32 + shift) as f64 * 0.25)
                .collect()
        };
        let id = draw(1 + seed as usize % 37, 1);
        let ood = draw(1 + seed as usize % 23, 0);
        (scoring::auroc(&id, &ood).unwrap() - oracle::auroc(&id, &ood)).abs()
    })
}

pub const ORACLES: [(&str, Check); 10] = [
    ("nt_xent_pair", oracle_nt_xent),
    ("self_supervised_loss", oracle_self),
    ("cluster_center_loss", oracle_center),
    ("cluster_instance_loss", oracle_instance),
    ("cluster_aware_loss + total_loss", oracle_combined),
    ("concentration", oracle_concentration),
    ("assign (mismatches)", oracle_assign),
    ("score_cos", oracle_score_cos),
    ("score_var", oracle_score_var),
    ("auroc", oracle_auroc),
];

fn gradient(instances: u64, f: impl Fn(&Instance, &mut Tape, Var) -> Result<Var>) -> Worst {
    Worst::over(instances, |seed| {
        let inst = instance(seed);
        finite_difference_check(|t, v| f(&inst, t, v), &tensor(&inst.features), FD_STEP).unwrap()
    })
}

pub fn gradient_nt_xent(instances: u64) -> Worst {
    gradient(instances, |inst, t, z| {
        let n = inst.features.len();
        let i = inst.assignments[0] % n;
        nt_xent_pair(t, z, i, (i + 1) % n, inst.tau)
    })
}

pub fn gradient_self(instances: u64) -> Worst {
    gradient(instances, |inst, t, z| self_supervised_loss(t, z, inst.tau))
}

pub fn gradient_center(instances: u64) -> Worst {
    let a = gradient(instances, |inst, t, h| center(inst, t, h, false));
    let b = gradient(instances, |inst, t, h| center(inst, t, h, true));
    if b.error > a.error {
        b
    } else {
        a
    }
}

pub fn gradient_instance(instances: u64) -> Worst {
    gradient(instances, |inst, t, h| {
        Ok(cluster_instance_loss(t, h, &inst.assignments, inst.tau)?.loss)
    })
}

pub fn gradient_cluster(instances: u64) -> Worst {
    gradient(instances, |inst, t, h| {
        let ccl = center(inst, t, h, false)?;
        let cil = cluster_instance_loss(t, h, &inst.assignments, inst.tau)?.loss;
        cluster_aware_loss(t, ccl, cil)
    })
}

/// The total loss with `h` as the input and `z = h·W` for a fixed random `W`,
/// so the two branches see different features.
pub fn gradient_total(instances: u64) -> Worst {
    gradient(instances, |inst, t, h| {
        let d = inst.features[0].len();
        let mut r = rng(inst.features.len() as u64 * 31 + d as u64);
        let w = t.constant(Tensor::from_rows(&random_rows(&mut r, d, 5))?);
        let lambda = r.random_range(0.1..0.9);
        let z = t.matmul(h, w)?;
        let s = self_supervised_loss(t, z, inst.tau)?;
        let ccl = center(inst, t, h, false)?;
        let cil = cluster_instance_loss(t, h, &inst.assignments, inst.tau)?.loss;
        let cluster = cluster_aware_loss(t, ccl, cil)?;
        total_loss(t, s, cluster, lambda)
    })
}

pub const GRADIENTS: [(&str, Check); 6] = [
    ("nt_xent_pair", gradient_nt_xent),
    ("self_supervised_loss", gradient_self),
    ("cluster_center_loss", gradient_center),
    ("cluster_instance_loss", gradient_instance),
    ("cluster_aware_loss", gradient_cluster),
    ("total_loss", gradient_total),
];
