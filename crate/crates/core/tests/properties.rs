//! Invariants of the losses, clustering, scoring and model.

mod common;

use ccl::autodiff::{Tape, Tensor};
use ccl::clustering::{assign, kmeans_fit, kmeans_fit_from};
use ccl::losses::{
    cluster_aware_loss, cluster_center_loss, cluster_instance_loss, self_supervised_loss,
};
use ccl::model::{Model, ModelWidths};
use ccl::scoring::{auroc, score_cos, score_rows, top_k_rows, ReferenceBank, ScoreKind};
use common::{instance, random_rows, rng, tensor, Instance, Rows};
use proptest::prelude::*;
use rand::Rng;

fn scaled(rows: &Rows, c: f64) -> Rows {
    rows.iter()
        .map(|r| r.iter().map(|x| x * c).collect())
        .collect()
}

fn losses(inst: &Instance, feats: &Rows) -> [f64; 3] {
    let mut t = Tape::new();
    let h = t.leaf(tensor(feats));
    let s = self_supervised_loss(&mut t, h, inst.tau).unwrap();
    let c = cluster_center_loss(
        &mut t,
        h,
        &tensor(&inst.centers),
        &inst.assignments,
        &inst.phis,
        false,
    )
    .unwrap();
    let i = cluster_instance_loss(&mut t, h, &inst.assignments, inst.tau)
        .unwrap()
        .loss;
    [s, c, i].map(|v| t.scalar(v).unwrap())
}

fn assert_close(a: f64, b: f64, tol: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= tol * a.abs().max(1.0), "{a} vs {b}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let inst = instance(seed);
        let base = losses(&inst, &inst.features);
        let moved = losses(&inst, &scaled(&inst.features, c));
        for (a, b) in base.iter().zip(&moved) {
            assert_close(*a, *b, 1e-10)?;
        }
    }

    #[test]
    fn swapping_views_keeps_self_loss(seed in any::<u64>()) {
        let inst = instance(seed);
        let mut swapped = inst.features.clone();
        for k in 0..swapped.len() / 2 {
            swapped.swap(2 * k, 2 * k + 1);
        }
        assert_close(losses(&inst, &inst.features)[0], losses(&inst, &swapped)[0], 1e-12)?;
    }

    #[test]
    fn relabeling_centers_keeps_center_loss(seed in any::<u64>()) {
        let inst = instance(seed);
        let r = inst.centers.len();
        let perm: Vec<usize> = (0..r).rev().collect();
        let mut relabeled = inst.clone();
        for (old, &new) in perm.iter().enumerate() {
            relabeled.centers[new] = inst.centers[old].clone();
            relabeled.phis[new] = inst.phis[old];
        }
        relabeled.assignments = inst.assignments.iter().map(|&a| perm[a]).collect();
        assert_close(losses(&inst, &inst.features)[1], losses(&relabeled, &inst.features)[1], 1e-12)?;
    }

    #[test]
    fn auroc_is_antisymmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let id: Vec<f64> = (0..r.random_range(1..60)).map(|_| r.random()).collect();
        let ood: Vec<f64> = (0..r.random_range(1..60)).map(|_| r.random::<f64>() - 0.2).collect();
        let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_increasing_transforms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let id: Vec<f64> = (0..40).map(|_| r.random_range(-2.0..2.0)).collect();
        let ood: Vec<f64> = (0..30).map(|_| r.random_range(-2.5..1.5)).collect();
        let f = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 + x.powi(3)).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
    }

    #[test]
    fn score_cos_is_homogeneous_in_bank_norms(seed in any::<u64>(), gamma in 0.01f64..100.0) {
        let mut r = rng(seed);
        let bank = random_rows(&mut r, 20, 8);
        let queries = random_rows(&mut r, 12, 8);
        let a = ReferenceBank::new(tensor(&bank)).unwrap();
        let b = ReferenceBank::new(tensor(&scaled(&bank, gamma))).unwrap();
        for q in &queries {
            assert_close(score_cos(&a, q).unwrap() * gamma, score_cos(&b, q).unwrap(), 1e-12)?;
        }
        let ood = random_rows(&mut r, 9, 8);
        let auc = |bank: &ReferenceBank| {
            let id = score_rows(bank, &tensor(&queries), ScoreKind::Cos, 2).unwrap();
            let od = score_rows(bank, &tensor(&ood), ScoreKind::Cos, 2).unwrap();
            auroc(&id, &od).unwrap()
        };
        prop_assert_eq!(auc(&a), auc(&b));
    }

    #[test]
    fn top_k_set_ignores_query_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let bank = ReferenceBank::new(tensor(&random_rows(&mut r, 25, 6))).unwrap();
        let z = random_rows(&mut r, 1, 6).remove(0);
        let zc: Vec<f64> = z.iter().map(|x| x * c).collect();
        prop_assert_eq!(top_k_rows(&bank, &z, 7).unwrap(), top_k_rows(&bank, &zc, 7).unwrap());
    }

    #[test]
    fn kmeans_is_deterministic_and_monotone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = r.random_range(8..60);
        let k = r.random_range(2..6);
        let points = tensor(&random_rows(&mut r, m, 5));
        let a = kmeans_fit(&points, k, seed, 50, 0.0).unwrap();
        let b = kmeans_fit(&points, k, seed, 50, 0.0).unwrap();
        prop_assert_eq!(&a, &b);
        for w in a.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "objective rose: {:?}", a.objective);
        }
        let mut counts = vec![0; k];
        for &j in &a.assignments {
            counts[j] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c > 0));
        prop_assert_eq!(assign(&points, &a.centers).unwrap(), a.assignments);
    }

    #[test]
    fn kmeans_ignores_duplicated_points(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows = random_rows(&mut r, 30, 4);
        let twice: Rows = rows.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let single = kmeans_fit(&tensor(&rows), 3, seed, 100, 1e-12).unwrap();
        let double = kmeans_fit(&tensor(&twice), 3, seed, 100, 1e-12).unwrap();
        for (a, b) in single.centers.data().iter().zip(double.centers.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let paired: Vec<usize> = single.assignments.iter().flat_map(|&a| [a, a]).collect();
        prop_assert_eq!(double.assignments, paired);
    }
}

#[test]
fn separated_blobs_are_recovered() {
    let mut r = rng(5);
    let mut rows = Vec::new();
    for (cx, cy) in [(1.0, 0.1), (0.1, 1.0)] {
        for _ in 0..40 {
            rows.push(vec![
                cx + r.random_range(-0.05..0.05),
                cy + r.random_range(-0.05..0.05),
            ]);
        }
    }
    for seed in 0..20 {
        let fit = kmeans_fit(&tensor(&rows), 2, seed, 100, 1e-9).unwrap();
        let first = fit.assignments[0];
        assert!(fit.assignments[..40].iter().all(|&a| a == first));
        assert!(fit.assignments[40..].iter().all(|&a| a != first));
        // each center lies inside the angular range of its blob
        for (j, blob) in [(first, &rows[..40]), (1 - first, &rows[40..])] {
            let angle = |p: &[f64]| p[1].atan2(p[0]);
            let lo = blob.iter().map(|p| angle(p)).fold(f64::INFINITY, f64::min);
            let hi = blob
                .iter()
                .map(|p| angle(p))
                .fold(f64::NEG_INFINITY, f64::max);
            let c = angle(fit.centers.row(j));
            assert!(lo <= c && c <= hi, "seed {seed}: {lo} <= {c} <= {hi}");
        }
    }
}

#[test]
fn kmeans_starting_at_the_points_stays_put() {
    let p = tensor(&vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ]);
    let fit = kmeans_fit_from(&p, &p, 20, 0.0).unwrap();
    assert_eq!(fit.assignments, vec![0, 1, 2]);
    assert_eq!(fit.centers, p);
}

fn matvec_chain(x: &[f64], layers: &[(Vec<Vec<f64>>, Vec<f64>)], relu_last: bool) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut next = b.clone();
        for (i, xi) in cur.iter().enumerate() {
            for (o, n) in next.iter_mut().enumerate() {
                *n += xi * w[i][o];
            }
        }
        if l + 1 < layers.len() || relu_last {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        cur = next;
    }
    cur
}

fn layers_of(mlp: &ccl::model::Mlp) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    mlp.layers()
        .iter()
        .map(|l| {
            let w = l.weight.row_iter().map(|r| r.to_vec()).collect();
            (w, l.bias.data().to_vec())
        })
        .collect()
}

#[test]
fn model_matches_hand_evaluation() {
    let widths = ModelWidths::default();
    for seed in 0..10 {
        let model = Model::init(seed, &widths).unwrap();
        let x = random_rows(&mut rng(seed + 99), 6, widths.input_dim());
        let (h, z) = model.embed(&tensor(&x)).unwrap();
        let enc = layers_of(&model.encoder);
        let head = layers_of(&model.projection);
        for (i, row) in x.iter().enumerate() {
            let hh = matvec_chain(row, &enc, model.encoder.relu_output());
            let zz = matvec_chain(&hh, &head, model.projection.relu_output());
            for (a, b) in h.row(i).iter().zip(&hh) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in z.row(i).iter().zip(&zz) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(model.project_values(&h).unwrap(), z);
    }
}

/// With clustering on the embedding layer, the cluster-aware loss must not
/// reach the projection head; the self-supervised loss reaches both parts.
#[test]
fn cluster_loss_gradient_stops_at_the_embedding_layer() {
    let widths = ModelWidths {
        encoder: vec![6, 10, 8],
        projection: vec![8, 8, 4],
    };
    for seed in 0..10 {
        let model = Model::init(seed, &widths).unwrap();
        let mut r = rng(seed);
        let x = Tensor::from_rows(&random_rows(&mut r, 8, 6)).unwrap();
        let centers = Tensor::from_rows(&random_rows(&mut r, 3, 8)).unwrap();

        let mut t = Tape::new();
        let vars = model.register(&mut t);
        let xv = t.constant(x);
        let h = model.encode(&mut t, &vars, xv).unwrap();
        let z = model.project(&mut t, &vars, h).unwrap();
        let a = assign(t.value(h), &centers).unwrap();
        let ccl = cluster_center_loss(&mut t, h, &centers, &a, &[0.3, 0.5, 0.7], false).unwrap();
        let cil = cluster_instance_loss(&mut t, h, &a, 0.5).unwrap().loss;
        let cluster = cluster_aware_loss(&mut t, ccl, cil).unwrap();
        let grads = t.backward(cluster).unwrap();
        for &(w, b) in &vars.projection {
            for v in [w, b] {
                assert!(grads.wrt(v).data().iter().all(|&g| g == 0.0));
            }
        }
        let enc_norm: f64 = vars
            .encoder
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| grads.wrt(v).data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(enc_norm > 0.0);

        let s = self_supervised_loss(&mut t, z, 0.5).unwrap();
        let grads = t.backward(s).unwrap();
        let touched = |vs: &[(ccl::autodiff::Var, ccl::autodiff::Var)]| {
            vs.iter()
                .any(|&(w, _)| grads.wrt(w).data().iter().any(|&g| g != 0.0))
        };
        assert!(touched(&vars.encoder) && touched(&vars.projection));
    }
}
