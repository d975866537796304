#![allow(dead_code)]

use nalgebra::DMatrix;
use purity_core::headmodel::{ClassifierHead, DisentanglementTransform, TransformMode};
use purity_core::protobank::{channel_activation, Sign};
use purity_core::tensorio::{FeatureStore, InMemoryStore};
use purity_core::{apply_transform, FeatureTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn random_tensor(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureTensor {
    FeatureTensor::from_fn(h, w, d, |_, _, _| normal(rng))
}

/// Orthogonal: skew parameters of scale `scale`. Free: `I + scale · G`, redrawn until invertible.
pub fn random_transform(rng: &mut impl Rng, mode: TransformMode, d: usize, scale: f64) -> DisentanglementTransform {
    loop {
        let params: Vec<f64> = match mode {
            TransformMode::Orthogonal => (0..d * d.saturating_sub(1) / 2).map(|_| scale * normal(rng)).collect(),
            TransformMode::Free => (0..d * d)
                .map(|idx| if idx / d == idx % d { 1.0 } else { 0.0 } + scale * normal(rng))
                .collect(),
        };
        if let Ok(u) = DisentanglementTransform::from_params(mode, d, params) {
            return u;
        }
    }
}

pub fn random_head(rng: &mut impl Rng, classes: usize, d: usize, with_bias: bool) -> ClassifierHead {
    let w = DMatrix::from_fn(classes, d, |_, _| normal(rng));
    let bias = with_bias.then(|| (0..classes).map(|_| normal(rng)).collect());
    ClassifierHead::new(w, bias).unwrap()
}

pub fn random_store(rng: &mut impl Rng, samples: usize, h: usize, w: usize, d: usize, classes: usize) -> InMemoryStore {
    let items = (0..samples)
        .map(|i| (format!("r{i:04}"), i % classes, random_tensor(rng, h, w, d)))
        .collect();
    InMemoryStore::new(d, items).unwrap()
}

/// Reference top-`m` by sorting every sample: score descending, then store index ascending.
pub fn sorted_prototype_ids<S: FeatureStore>(
    store: &S,
    u: &DisentanglementTransform,
    k: usize,
    m: usize,
    sign: Sign,
) -> Vec<String> {
    let mut scored: Vec<(f64, usize)> = (0..store.len())
        .map(|i| {
            let zt = apply_transform(u, &store.load(i).unwrap()).unwrap();
            (sign.factor() * channel_activation(&zt, k).unwrap(), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(m)
        .map(|(_, i)| store.sample_id(i).to_string())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest relative disagreement between the analytic and central-difference gradients.
pub fn gradient_rel_error(analytic: &[f64], f: impl Fn(&[f64]) -> f64, at: &[f64], step: f64) -> f64 {
    let mut x = at.to_vec();
    let numeric: Vec<f64> = (0..at.len())
        .map(|i| {
            x[i] = at[i] + step;
            let up = f(&x);
            x[i] = at[i] - step;
            let down = f(&x);
            x[i] = at[i];
            (up - down) / (2.0 * step)
        })
        .collect();
    let scale = numeric.iter().chain(analytic).map(|v| v.abs()).fold(1e-6, f64::max);
    max_abs_diff(analytic, &numeric) / scale
}
