//! Plain-loop reimplementations of the losses and scores, written directly
//! from their formulas with no shared code.

use super::Rows;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn ln_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    values.map(f64::exp).sum::<f64>().ln()
}

pub fn nt_xent(z: &Rows, i: usize, j: usize, tau: f64) -> f64 {
    let denom = ln_sum_exp(
        (0..z.len())
            .filter(|&k| k != i)
            .map(|k| cos(&z[i], &z[k]) / tau),
    );
    -cos(&z[i], &z[j]) / tau + denom
}

pub fn l_self(z: &Rows, tau: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..z.len() / 2 {
        total += nt_xent(z, 2 * k, 2 * k + 1, tau) + nt_xent(z, 2 * k + 1, 2 * k, tau);
    }
    total / z.len() as f64
}

pub fn l_ccl(h: &Rows, centers: &Rows, a: &[usize], phis: &[f64], include_positive: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..h.len() {
        let pos = cos(&h[i], &centers[a[i]]) / phis[a[i]];
        let denom = ln_sum_exp(
            (0..centers.len())
                .filter(|&j| include_positive || j != a[i])
                .map(|j| cos(&h[i], &centers[j]) / phis[j]),
        );
        total += denom - pos;
    }
    total / h.len() as f64
}

pub fn l_cil(h: &Rows, a: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..h.len() {
        let positives: Vec<usize> = (0..h.len()).filter(|&p| p != i && a[p] == a[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let denom = ln_sum_exp(
            (0..h.len())
                .filter(|&k| k != i)
                .map(|k| cos(&h[i], &h[k]) / tau),
        );
        let mut term = 0.0;
        for &p in &positives {
            term += cos(&h[i], &h[p]) / tau - denom;
        }
        total -= term / positives.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

pub fn phi(members: &Rows, center: &[f64], alpha: f64, floor: f64) -> f64 {
    let t = members.len() as f64;
    let spread: f64 = members
        .iter()
        .map(|m| norm(&m.iter().zip(center).map(|(x, c)| x - c).collect::<Vec<_>>()))
        .sum();
    (spread / (t * (t + alpha).ln())).max(floor)
}

pub fn nearest(points: &Rows, centers: &Rows) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            for j in 1..centers.len() {
                if cos(p, &centers[j]) > cos(p, &centers[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn score_cos(bank: &Rows, z: &[f64]) -> f64 {
    bank.iter()
        .map(|b| cos(b, z) * norm(b))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_var(bank: &Rows, z: &[f64], k: usize) -> f64 {
    // selection by repeated maximum, ties to the lower index
    let mut left: Vec<usize> = (0..bank.len()).collect();
    let mut chosen = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for &i in &left {
            let s = cos(&bank[i], z) * norm(&bank[i]);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        let (i, _) = best.unwrap();
        chosen.push(i);
        left.retain(|&x| x != i);
    }
    let d = z.len();
    let mean: Vec<f64> = (0..d)
        .map(|c| chosen.iter().map(|&i| bank[i][c]).sum::<f64>() / k as f64)
        .collect();
    let ss: f64 = chosen
        .iter()
        .map(|&i| (0..d).map(|c| (bank[i][c] - mean[c]).powi(2)).sum::<f64>())
        .sum();
    let sd = (ss / (k - 1) as f64).sqrt().max(1e-8);
    score_cos(bank, z) / sd
}

pub fn auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in id {
        for b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}
