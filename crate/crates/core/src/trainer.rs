//! Purity maximization over the transform parameters.
//!
//! Everything except `U` is frozen. The objective lives on the prototype
//! bank, which is rebuilt on a schedule while its width `m` shrinks linearly
//! from `m_start` to `m_end`. Each evaluation recomputes every record's
//! prototypical pixel at the current `U`; the argmax is treated as locally
//! constant when differentiating.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::headmodel::{
    max_abs_identity_dev, verify_preservation, ClassifierHead, DisentanglementTransform, PreservationReport,
    TransformMode, INVERSE_TOL,
};
use crate::protobank::{build_bank, peak_cell, signed_purity, PrototypeBank, Sign, PURITY_EPS};
use crate::tensorio::FeatureStore;

/// Logit deviation tolerated by the post-training preservation check.
pub const PRESERVATION_TOL: f64 = 1e-6;
/// Maximum number of step halvings before a non-improving step is accepted anyway.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub recalc_every: usize,
    pub m_start: usize,
    pub m_end: usize,
    pub mode: TransformMode,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of `‖U − I‖²_F`; free mode only.
    pub free_mode_penalty: f64,
    pub inner_iters: usize,
    /// Records score `purity^q`. `q = 1` is plain mean purity; `q = 2` is the
    /// mean energy share of the prototypical pixel on its own channel.
    pub purity_exponent: f64,
    /// Echoed into the trace. The optimizer itself draws no random numbers.
    pub seed: u64,
    pub include_negative: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            recalc_every: 2,
            m_start: 100,
            m_end: 5,
            mode: TransformMode::Orthogonal,
            learning_rate: 0.5,
            momentum: 0.9,
            free_mode_penalty: 1e-3,
            inner_iters: 10,
            purity_exponent: 2.0,
            seed: 0,
            include_negative: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs < 1 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.recalc_every < 1 {
            problems.push("recalc_every must be at least 1".to_string());
        }
        if self.m_end < 1 || self.m_end > self.m_start {
            problems.push(format!(
                "need 1 <= m_end <= m_start, got m_start {} m_end {}",
                self.m_start, self.m_end
            ));
        }
        if self.inner_iters < 1 {
            problems.push("inner_iters must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push("momentum must lie in [0, 1)".to_string());
        }
        if !(self.free_mode_penalty >= 0.0 && self.free_mode_penalty.is_finite()) {
            problems.push("free_mode_penalty must be non-negative".to_string());
        }
        if !(self.purity_exponent >= 1.0 && self.purity_exponent.is_finite()) {
            problems.push("purity_exponent must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Bank width at `epoch`: linear from `m_start` (epoch 0) to `m_end` (epoch
/// `epochs`), rounded half away from zero.
pub fn m_schedule(epoch: usize, cfg: &TrainConfig) -> usize {
    let epochs = cfg.epochs.max(1) as f64;
    let t = epoch.min(cfg.epochs) as f64 / epochs;
    let start = cfg.m_start as f64;
    let end = cfg.m_end as f64;
    let raw = (start + (end - start) * t).round();
    (raw as usize).clamp(cfg.m_end, cfg.m_start)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ObjectiveRecord {
    slot: usize,
    channel: usize,
    sign: Sign,
}

/// The bank-level purity objective with the prototype tensors it needs.
#[derive(Debug, Clone)]
pub struct PurityObjective {
    tensors: Vec<FeatureTensor>,
    records: Vec<ObjectiveRecord>,
    exponent: f64,
}

struct RecordEval {
    purity: f64,
    /// `∂ purity^q / ∂p` and the untransformed pixel `z`; `None` when clamped.
    grad: Option<(Vec<f64>, Vec<f64>)>,
}

impl PurityObjective {
    /// Loads the untransformed tensors of every positive record (and negative
    /// ones when asked). The bank's records fix which samples and channels
    /// participate; pixels are recomputed per evaluation.
    pub fn from_bank<S: FeatureStore + ?Sized>(
        bank: &PrototypeBank,
        store: &S,
        include_negative: bool,
        exponent: f64,
    ) -> Result<Self> {
        let mut slots: std::collections::BTreeMap<usize, usize> = Default::default();
        let mut records = Vec::new();
        let mut order = Vec::new();
        let signs: &[Sign] = if include_negative {
            &[Sign::Positive, Sign::Negative]
        } else {
            &[Sign::Positive]
        };
        for &sign in signs {
            for k in 0..bank.channels() {
                for r in bank.records(k, sign) {
                    let index = store
                        .index_of(&r.sample_id)
                        .ok_or_else(|| Error::UnknownSample(r.sample_id.clone()))?;
                    let next = slots.len();
                    let slot = *slots.entry(index).or_insert_with(|| {
                        order.push(index);
                        next
                    });
                    records.push(ObjectiveRecord { slot, channel: k, sign });
                }
            }
        }
        if records.is_empty() {
            return Err(Error::contract("purity objective needs a non-empty bank"));
        }
        let tensors = order.iter().map(|&i| store.load(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tensors,
            records,
            exponent,
        })
    }

    /// Builds an objective from explicit `(tensor, channel, sign)` triples.
    pub fn from_parts(items: Vec<(FeatureTensor, usize, Sign)>, exponent: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("purity objective needs a non-empty bank"));
        }
        let mut tensors = Vec::with_capacity(items.len());
        let mut records = Vec::with_capacity(items.len());
        for (slot, (t, channel, sign)) in items.into_iter().enumerate() {
            if channel >= t.channels() {
                return Err(Error::contract(format!("channel {channel} out of range")));
            }
            tensors.push(t);
            records.push(ObjectiveRecord { slot, channel, sign });
        }
        Ok(Self {
            tensors,
            records,
            exponent,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    fn evaluate(&self, u: &DisentanglementTransform, with_grad: bool) -> Vec<RecordEval> {
        let m = u.matrix();
        self.records
            .par_iter()
            .map(|rec| {
                let z = &self.tensors[rec.slot];
                let k = rec.channel;
                // channel k of U ⊛ Z only; the full pixel is needed at the peak
                let row: Vec<f64> = (0..u.dim()).map(|j| m[(k, j)]).collect();
                let chan = FeatureTensor::from_fn(z.height(), z.width(), 1, |h, w, _| {
                    z.pixel(h, w).iter().zip(&row).map(|(a, b)| a * b).sum()
                });
                let (h, w) = peak_cell(&chan, 0, rec.sign);
                let zp = z.pixel(h, w).to_vec();
                let p = u.apply_vec(&zp);
                let purity = signed_purity(&p, k, rec.sign);
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let grad = (with_grad && purity > 0.0 && norm > PURITY_EPS).then(|| {
                    let s = rec.sign.factor();
                    let pk = p[k];
                    let scale = self.exponent * purity.powf(self.exponent - 1.0);
                    let n3 = norm * norm * norm;
                    let mut g: Vec<f64> = p.iter().map(|&pi| -s * pk * pi / n3).collect();
                    g[k] += s / norm;
                    g.iter_mut().for_each(|v| *v *= scale);
                    (g, zp)
                });
                RecordEval { purity, grad }
            })
            .collect()
    }

    fn score(&self, purity: f64) -> f64 {
        if self.exponent == 1.0 {
            purity
        } else {
            purity.powf(self.exponent)
        }
    }

    /// `1 − mean(purity^q)` over all records.
    pub fn purity_loss(&self, u: &DisentanglementTransform) -> f64 {
        let evals = self.evaluate(u, false);
        1.0 - evals.iter().map(|e| self.score(e.purity)).sum::<f64>() / evals.len() as f64
    }

    /// Plain purity (exponent 1) of every record, in bank order.
    pub fn purities(&self, u: &DisentanglementTransform) -> Vec<f64> {
        self.evaluate(u, false).into_iter().map(|e| e.purity).collect()
    }

    /// `∂ purity_loss / ∂U`.
    pub fn gradient_matrix(&self, u: &DisentanglementTransform) -> DMatrix<f64> {
        let d = u.dim();
        let evals = self.evaluate(u, true);
        let r = evals.len() as f64;
        let mut g = DMatrix::zeros(d, d);
        for (dp, z) in evals.iter().filter_map(|e| e.grad.as_ref()) {
            for i in 0..d {
                for j in 0..d {
                    g[(i, j)] -= dp[i] * z[j] / r;
                }
            }
        }
        g
    }

    /// Gradient of [`purity_loss`](Self::purity_loss) with respect to `u.params()`.
    pub fn loss_gradient(&self, u: &DisentanglementTransform) -> Vec<f64> {
        u.chain_gradient(&self.gradient_matrix(u))
    }
}

/// Loss of `objective` at `u`.
pub fn purity_loss(objective: &PurityObjective, u: &DisentanglementTransform) -> f64 {
    objective.purity_loss(u)
}

/// Gradient of [`purity_loss`] over the transform parameters.
pub fn loss_gradient(objective: &PurityObjective, u: &DisentanglementTransform) -> Vec<f64> {
    objective.loss_gradient(u)
}

fn penalty(u: &DisentanglementTransform, lambda: f64) -> (f64, Option<DMatrix<f64>>) {
    if u.mode() != TransformMode::Free || lambda == 0.0 {
        return (0.0, None);
    }
    let d = u.dim();
    let delta = u.matrix() - DMatrix::<f64>::identity(d, d);
    (lambda * delta.norm_squared(), Some(delta * (2.0 * lambda)))
}

/// Training loss including the free-mode regularizer.
pub fn total_loss(objective: &PurityObjective, u: &DisentanglementTransform, cfg: &TrainConfig) -> f64 {
    objective.purity_loss(u) + penalty(u, cfg.free_mode_penalty).0
}

pub fn total_gradient(objective: &PurityObjective, u: &DisentanglementTransform, cfg: &TrainConfig) -> Vec<f64> {
    let mut g = objective.gradient_matrix(u);
    if let Some(pg) = penalty(u, cfg.free_mode_penalty).1 {
        g += pg;
    }
    u.chain_gradient(&g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub m: usize,
    pub loss: f64,
    pub mean_purity: f64,
    pub min_purity: f64,
    /// Steps accepted without improvement after exhausting the halvings.
    pub step_warnings: usize,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Mean purity of the final bank (width `m_end`) at the trained `U`.
    pub final_mean_purity: f64,
    pub initial_mean_purity: f64,
    pub preservation: PreservationReport,
}

impl TrainTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// Copy with wall-clock fields zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.epochs.iter_mut().for_each(|e| e.wall_time_ms = 0.0);
        t
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub transform: DisentanglementTransform,
    pub trace: TrainTrace,
    /// Bank of width `m_end` at the trained `U`, tagged with the final epoch.
    pub bank: PrototypeBank,
}

/// Runs purity training from `U = I` and verifies prediction preservation.
///
/// `on_epoch` is invoked after each epoch with its record.
pub fn train<S: FeatureStore + ?Sized>(
    store: &S,
    head: &ClassifierHead,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Validation(vec!["empty dataset".into()]));
    }
    let d = store.channels();
    let mut u = DisentanglementTransform::identity(d, cfg.mode);
    let mut velocity = vec![0.0; u.params().len()];
    let mut objective: Option<PurityObjective> = None;
    let mut m = cfg.m_start;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut initial_mean_purity = f64::NAN;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if epoch % cfg.recalc_every == 0 || objective.is_none() {
            m = m_schedule(epoch, cfg);
            let bank = build_bank(store, &u, m)?;
            if epoch == 0 {
                initial_mean_purity = bank.mean_purity();
            }
            objective = Some(PurityObjective::from_bank(
                &bank,
                store,
                cfg.include_negative,
                cfg.purity_exponent,
            )?);
        }
        let obj = objective.as_ref().expect("objective built above");
        let mut step_warnings = 0;
        let mut loss = total_loss(obj, &u, cfg);

        for _ in 0..cfg.inner_iters {
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss is {loss}"),
                });
            }
            let grad = total_gradient(obj, &u, cfg);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
            }

            let mut step = velocity.clone();
            let mut fallback: Option<(DisentanglementTransform, f64, Vec<f64>)> = None;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let params: Vec<f64> = u.params().iter().zip(&step).map(|(p, s)| p + s).collect();
                match DisentanglementTransform::from_params(cfg.mode, d, params) {
                    Ok(candidate) => {
                        let cand_loss = total_loss(obj, &candidate, cfg);
                        if cand_loss <= loss {
                            accepted = Some((candidate, cand_loss, step.clone()));
                            break;
                        }
                        if cand_loss.is_finite() {
                            fallback = Some((candidate, cand_loss, step.clone()));
                        }
                    }
                    // singular (I + S) or ill-conditioned free U: shrink and retry
                    Err(Error::Singular { .. }) | Err(Error::Contract(_)) => {}
                    Err(e) => return Err(e),
                }
                step.iter_mut().for_each(|s| *s *= 0.5);
            }
            match accepted {
                Some((next, next_loss, taken)) => {
                    u = next;
                    loss = next_loss;
                    velocity = taken;
                }
                None => {
                    // accept the smallest non-improving step and drop the momentum
                    step_warnings += 1;
                    if let Some((next, next_loss, _)) = fallback {
                        u = next;
                        loss = next_loss;
                    }
                    velocity.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        if u.mode() == TransformMode::Free {
            let dev = max_abs_identity_dev(&(u.matrix() * u.inverse()));
            if dev > INVERSE_TOL {
                return Err(Error::Training {
                    epoch,
                    reason: format!("inverse drifted ({dev:.3e})"),
                });
            }
        }
        debug_assert!(
            u.mode() != TransformMode::Orthogonal
                || max_abs_identity_dev(&(u.matrix().transpose() * u.matrix())) <= 1e-8
        );

        let purities = obj.purities(&u);
        let rec = EpochRecord {
            epoch,
            m,
            loss,
            mean_purity: purities.iter().sum::<f64>() / purities.len() as f64,
            min_purity: purities.iter().copied().fold(f64::INFINITY, f64::min),
            step_warnings,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&rec);
        records.push(rec);
    }

    let mut bank = build_bank(store, &u, cfg.m_end)?;
    bank.epoch_tag = cfg.epochs;
    let preservation = verify_preservation(store, head, &u)?;
    if !preservation.holds(PRESERVATION_TOL) {
        return Err(Error::Preservation {
            max_abs_logit_dev: preservation.max_abs_logit_dev,
            argmax_mismatches: preservation.argmax_mismatches,
        });
    }
    let trace = TrainTrace {
        config: cfg.clone(),
        epochs: records,
        final_mean_purity: bank.mean_purity(),
        initial_mean_purity,
        preservation,
    };
    Ok(TrainOutcome {
        transform: u,
        trace,
        bank,
    })
}
