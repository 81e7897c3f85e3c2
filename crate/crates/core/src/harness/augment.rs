use rand::Rng;
use rand_distr::StandardNormal;

use super::config::AugmentSpec;
use super::rng_stream;
use crate::autodiff::Tensor;

fn view(src: &[f64], spec: &AugmentSpec, rng: &mut impl Rng) -> Vec<f64> {
    let gain = if spec.gain_min == spec.gain_max {
        spec.gain_min
    } else {
        rng.random_range(spec.gain_min..spec.gain_max)
    };
    src.iter()
        .map(|&x| {
            let noise: f64 = rng.sample(StandardNormal);
            let v = gain * x + spec.noise * noise;
            if spec.mask_prob > 0.0 && rng.random::<f64>() < spec.mask_prob {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Two independent views per source row: rows `2k` and `2k + 1` of the
/// output both come from row `k`. A view is `mask ⊙ (gain · x + σ · ε)` with
/// one gain per view and an independent Bernoulli mask per coordinate.
pub fn augment(batch: &Tensor, spec: &AugmentSpec, rng: &mut impl Rng) -> Tensor {
    let (n, d) = (batch.rows(), batch.cols());
    let mut out = Vec::with_capacity(2 * n * d);
    for row in batch.row_iter() {
        out.extend(view(row, spec, rng));
        out.extend(view(row, spec, rng));
    }
    Tensor::matrix(2 * n, d, out).expect("2N x d")
}

/// [`augment`] with a dedicated generator seeded from `seed`.
pub fn augment_seeded(batch: &Tensor, spec: &AugmentSpec, seed: u64) -> Tensor {
    augment(batch, spec, &mut rng_stream(seed, 0))
}
