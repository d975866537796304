//! Planted-mixing fixtures.
//!
//! Each sample of class `c` starts as a latent map `L` of Gaussian noise with
//! one spike on channel `chan(c)`. Stored features are `Z = Mᵀ ⊛ L` for a
//! random orthogonal `M`, so `U = M` recovers the pure latent channels. The
//! head is `A = E M`, where `E` maps channel `chan(c)` to class `c`, which
//! makes the baseline classifier correct on `Z`.
//!
//! Randomness is ChaCha20 (`rand_chacha`) seeded with `seed` via
//! `seed_from_u64`. Sample `i` draws from stream `i`; the mixing matrix uses
//! stream `u64::MAX` and the class map stream `u64::MAX - 1`. Within a
//! sample, the noise is drawn in `(h, w, d)` row-major order, followed by the
//! spike row and column.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::headmodel::{argmax, pool, ClassifierHead};
use crate::protobank::PrototypeBank;
use crate::tensorio::{atomic_write, write_tensor, FeatureStore, InMemoryStore, Manifest, SampleEntry};

const MIXING_STREAM: u64 = u64::MAX;
const CLASS_MAP_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub spike_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Use `M = I`, so stored features are already pure.
    pub identity_mixing: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            channels: 8,
            height: 7,
            width: 7,
            samples_per_class: 40,
            spike_strength: 5.0,
            noise_sigma: 0.1,
            seed: 0,
            identity_mixing: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 {
            problems.push("need at least one class".to_string());
        }
        if self.channels < self.num_classes {
            problems.push(format!(
                "channels ({}) must be at least num_classes ({})",
                self.channels, self.num_classes
            ));
        }
        if self.height == 0 || self.width == 0 {
            problems.push("spatial dims must be positive".to_string());
        }
        if self.samples_per_class == 0 {
            problems.push("need at least one sample per class".to_string());
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            problems.push("noise_sigma must be non-negative".to_string());
        }
        if !self.spike_strength.is_finite() || self.spike_strength <= self.noise_sigma {
            problems.push("spike_strength must exceed noise_sigma".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub channels: usize,
    /// `M`, row-major.
    pub mixing: Vec<f64>,
    /// `chan(c)` for each class.
    pub class_channels: Vec<usize>,
}

impl GroundTruth {
    pub fn mixing_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.channels, &self.mixing)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, "ground_truth", e.to_string()))
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Haar-distributed orthogonal matrix: Gram-Schmidt on a Gaussian matrix
/// with the sign convention `diag(R) > 0`.
pub fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    loop {
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        let mut ok = true;
        for j in 0..dim {
            let mut v = g.column(j).clone_owned();
            // two passes of modified Gram-Schmidt for stability
            for _ in 0..2 {
                for i in 0..j {
                    let qi = q.column(i);
                    let proj = qi.dot(&v);
                    v -= qi * proj;
                }
            }
            let n = v.norm();
            if n < 1e-10 {
                ok = false;
                break;
            }
            q.set_column(j, &(v / n));
        }
        if ok {
            return q;
        }
    }
}

pub fn mixing_matrix(spec: &SynthSpec) -> DMatrix<f64> {
    if spec.identity_mixing {
        DMatrix::identity(spec.channels, spec.channels)
    } else {
        random_orthogonal(spec.channels, &mut rng_for(spec.seed, MIXING_STREAM))
    }
}

pub fn class_channels(spec: &SynthSpec) -> Vec<usize> {
    let mut channels: Vec<usize> = (0..spec.channels).collect();
    channels.shuffle(&mut rng_for(spec.seed, CLASS_MAP_STREAM));
    channels.truncate(spec.num_classes);
    channels
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Latent map of sample `index` (class `index / samples_per_class`).
pub fn latent_sample(spec: &SynthSpec, index: usize, class_channels: &[usize]) -> FeatureTensor {
    let mut rng = rng_for(spec.seed, index as u64);
    let d = spec.channels;
    let mut latent = FeatureTensor::from_fn(spec.height, spec.width, d, |_, _, _| {
        spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let h = rng.random_range(0..spec.height);
    let w = rng.random_range(0..spec.width);
    let class = index / spec.samples_per_class;
    let target = class_channels[class];
    let spiked = latent.get(h, w, target) + spec.spike_strength;
    let mut data = latent.as_slice().to_vec();
    data[(h * spec.width + w) * d + target] = spiked;
    latent = FeatureTensor::new(spec.height, spec.width, d, data).expect("same shape");
    latent
}

fn mix(latent: &FeatureTensor, mixing: &DMatrix<f64>) -> FeatureTensor {
    let d = latent.channels();
    // Z[x] = Mᵀ L[x], rounded to the f32 storage precision
    let mut out = FeatureTensor::zeros(latent.height(), latent.width(), d);
    for (l, z) in latent.pixels().zip(out.pixels_mut()) {
        for (j, slot) in z.iter_mut().enumerate() {
            *slot = round_f32((0..d).map(|i| mixing[(i, j)] * l[i]).sum());
        }
    }
    out
}

/// An in-memory fixture. Values are rounded to `f32` so they match what
/// [`generate`] writes to disk.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub store: InMemoryStore,
    pub head: ClassifierHead,
    pub truth: GroundTruth,
}

pub fn generate_in_memory(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mixing = mixing_matrix(spec);
    let chans = class_channels(spec);
    let samples: Vec<(String, usize, FeatureTensor)> = (0..spec.num_samples())
        .into_par_iter()
        .map(|i| {
            let latent = latent_sample(spec, i, &chans);
            (sample_id(i), i / spec.samples_per_class, mix(&latent, &mixing))
        })
        .collect();
    let store = InMemoryStore::new(spec.channels, samples)?;
    let d = spec.channels;
    let rows: Vec<f64> = chans
        .iter()
        .flat_map(|&ch| (0..d).map(move |j| (ch, j)))
        .map(|(ch, j)| round_f32(mixing[(ch, j)]))
        .collect();
    let head = ClassifierHead::from_rows(spec.num_classes, d, &rows, None)?;
    let truth = GroundTruth {
        channels: d,
        mixing: (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| mixing[(i, j)])
            .collect(),
        class_channels: chans,
    };
    Ok(SynthData { store, head, truth })
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
    pub truth: GroundTruth,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const HEAD_FILE: &str = "head.ept";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const SPEC_FILE: &str = "synth_spec.json";

/// Writes manifest, feature files, head, and the ground-truth sidecar under `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<Fixture> {
    let data = generate_in_memory(spec)?;
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;

    let entries = (0..data.store.len())
        .into_par_iter()
        .map(|i| {
            let id = data.store.sample_id(i).to_string();
            let rel = PathBuf::from("features").join(format!("{id}.ept"));
            write_tensor(&data.store.tensor(i).to_ept(), &dir.join(&rel))?;
            Ok(SampleEntry {
                id,
                feature_path: rel,
                label: data.store.label(i),
                source_image: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_tensor(&data.head.weights_to_ept(), &dir.join(HEAD_FILE))?;
    let mut manifest = Manifest::new("synthetic", spec.num_classes, spec.channels, HEAD_FILE, None, entries);
    manifest
        .provenance
        .insert("generator".into(), "synthlab planted mixing".into());
    manifest.provenance.insert("seed".into(), spec.seed.to_string());
    let manifest_path = dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    let truth_path = dir.join(TRUTH_FILE);
    data.truth.save(&truth_path)?;
    let spec_text = serde_json::to_string_pretty(spec).expect("spec serializes");
    atomic_write(&dir.join(SPEC_FILE), spec_text.as_bytes())?;
    Ok(Fixture {
        manifest_path,
        truth_path,
        truth: data.truth,
    })
}

fn check_square(u: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<()> {
    if u.shape() != m.shape() || u.nrows() != u.ncols() {
        return Err(Error::contract(format!(
            "permutation score needs equal square matrices, got {:?} and {:?}",
            u.shape(),
            m.shape()
        )));
    }
    Ok(())
}

/// Mean over rows of `P = U Mᵀ` of `max |row| / ‖row‖₂`; 1 iff `P` is a signed permutation.
pub fn permutation_score(u: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_square(u, truth)?;
    let p = u * truth.transpose();
    let total: f64 = p
        .row_iter()
        .map(|row| {
            let peak = row.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let norm = row.norm();
            if norm > 0.0 {
                peak / norm
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / p.nrows() as f64)
}

/// For each class, the transformed channel most aligned with its planted
/// latent channel: `argmax_k (U Mᵀ)[k, chan(c)]`.
pub fn recovered_channels(u: &DMatrix<f64>, truth: &GroundTruth) -> Vec<usize> {
    let p = u * truth.mixing_matrix().transpose();
    truth
        .class_channels
        .iter()
        .map(|&ch| argmax(&p.column(ch).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Mean top-`top` purity over the recovered channels of the planted classes.
pub fn planted_purity(bank: &PrototypeBank, u: &DMatrix<f64>, truth: &GroundTruth, top: usize) -> f64 {
    let chans = recovered_channels(u, truth);
    chans.iter().map(|&k| bank.channel_mean_purity(k, top)).sum::<f64>() / chans.len() as f64
}

/// Fraction of samples whose baseline prediction `A · pool(Z) + b` equals the label.
pub fn baseline_accuracy<S: FeatureStore + ?Sized>(store: &S, head: &ClassifierHead) -> Result<f64> {
    let correct = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let z = store.load(i)?;
            Ok(usize::from(argmax(&head.logits(&pool(&z)?)?) == store.label(i)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / store.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let bad = SynthSpec {
            channels: 3,
            num_classes: 5,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            spike_strength: 0.05,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn mixing_is_orthogonal() {
        let m = mixing_matrix(&SynthSpec::default());
        let dev = crate::headmodel::max_abs_identity_dev(&(m.transpose() * &m));
        assert!(dev < 1e-12, "{dev}");
    }

    #[test]
    fn class_channels_are_distinct() {
        let spec = SynthSpec::default();
        let mut chans = class_channels(&spec);
        assert_eq!(chans.len(), spec.num_classes);
        chans.sort_unstable();
        chans.dedup();
        assert_eq!(chans.len(), spec.num_classes);
    }

    #[test]
    fn score_at_fixed_point_is_one() {
        let m = mixing_matrix(&SynthSpec::default());
        assert!((permutation_score(&m, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_way_mix_scores_inverse_sqrt_two() {
        let m = mixing_matrix(&SynthSpec::default());
        let mut u = m.clone();
        let avg = (m.row(0) + m.row(1)) * 0.5;
        u.set_row(0, &avg);
        u.set_row(1, &avg);
        let p = &u * m.transpose();
        let row0 = p.row(0);
        let s = row0.iter().map(|v| v.abs()).fold(0.0, f64::max) / row0.norm();
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let expected = (2.0 / 2f64.sqrt() + 6.0) / 8.0;
        assert!((permutation_score(&u, &m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DMatrix::<f64>::identity(4, 4);
        assert!(permutation_score(&a, &b).is_err());
    }
}
