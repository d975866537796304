//! Top-k contributing channels for a single prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headmodel::{adjust_head, apply_transform, argmax, pool, softmax, ClassifierHead, DisentanglementTransform};
use crate::protobank::{peak_cell, PrototypeBank, Sign};
use crate::tensorio::{atomic_write, FeatureStore};

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TopChannels {
    pub channels: Vec<(usize, f64)>,
    /// Every score was zero: the prediction has no positive evidence.
    pub degenerate: bool,
}

/// `scores = w_pred ⊙ ReLU(v)`, top `k` by score descending, ties by channel index.
pub fn topk_channels(v: &[f64], head: &ClassifierHead, pred: usize, k: usize) -> Result<TopChannels> {
    let d = head.channels();
    if k == 0 || k > d {
        return Err(Error::contract(format!("topk must lie in 1..={d}, got {k}")));
    }
    if v.len() != d {
        return Err(Error::contract(format!(
            "pooled vector has length {}, head expects {d}",
            v.len()
        )));
    }
    if pred >= head.num_classes() {
        return Err(Error::contract(format!("class {pred} out of range")));
    }
    let w = head.weights().row(pred);
    // `+ 0.0` folds -0.0 into 0.0 so zero scores tie and fall back to channel order
    let mut scored: Vec<(usize, f64)> = (0..d).map(|c| (c, w[c] * v[c].max(0.0) + 0.0)).collect();
    let degenerate = scored.iter().all(|&(_, s)| s == 0.0);
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(TopChannels {
        channels: scored,
        degenerate,
    })
}

/// Normalized `(x0, y0, x1, y1)` box around feature cell `(h, w)`.
///
/// The cell `[w/W, h/H, (w+1)/W, (h+1)/H]` is grown by `margin` cell sizes on
/// each side and clipped to the unit square.
pub fn evidence_box(coords: (usize, usize), grid: (usize, usize), margin: f64) -> [f64; 4] {
    let (h, w) = (coords.0 as f64, coords.1 as f64);
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    let margin = margin.max(0.0);
    [
        ((w - margin) / gw).clamp(0.0, 1.0),
        ((h - margin) / gh).clamp(0.0, 1.0),
        ((w + 1.0 + margin) / gw).clamp(0.0, 1.0),
        ((h + 1.0 + margin) / gh).clamp(0.0, 1.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRef {
    pub sample_id: String,
    pub activation: f64,
    pub purity: f64,
    pub pixel_coords: (usize, usize),
    pub evidence_box: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub channel: usize,
    pub score: f64,
    pub input_pixel_coords: (usize, usize),
    pub evidence_box: [f64; 4],
    pub prototypes: Vec<PrototypeRef>,
}

/// Audit of how much of the predicted logit the channel terms cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualIdentity {
    /// `Σ_c w_pred[c] · v[c]` over all channels, no ReLU.
    pub full_sum: f64,
    pub bias: f64,
    pub predicted_logit: f64,
    /// `Σ_c w_pred[c] · max(v[c], 0)` over all channels.
    pub relu_masked_sum: f64,
    /// Sum of the reported entries' scores.
    pub reported_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample_id: String,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
    pub softmax: Vec<f64>,
    pub entries: Vec<ChannelEntry>,
    pub degenerate: bool,
    pub residual: ResidualIdentity,
    pub topk: usize,
    pub m: usize,
    pub margin: f64,
    pub transform_checksum: String,
    pub bank_epoch_tag: usize,
}

impl ExplanationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainOptions {
    pub topk: usize,
    pub m: usize,
    pub margin: f64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            topk: 3,
            m: 5,
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Explains one sample: prediction under the compensated head, top-k channel
/// contributions, the input's own peak cell per channel, and the channel's
/// first `m` positive prototypes from `bank`.
pub fn explain<S: FeatureStore + ?Sized>(
    store: &S,
    u: &DisentanglementTransform,
    head: &ClassifierHead,
    bank: &PrototypeBank,
    sample_id: &str,
    opts: ExplainOptions,
) -> Result<ExplanationReport> {
    let index = store
        .index_of(sample_id)
        .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?;
    if bank.channels() != u.dim() {
        return Err(Error::contract(format!(
            "bank covers {} channels, transform is {}x{}",
            bank.channels(),
            u.dim(),
            u.dim()
        )));
    }
    let adjusted = adjust_head(head, u)?;
    let zt = apply_transform(u, &store.load(index)?)?;
    let v = pool(&zt)?;
    let logits = adjusted.logits(&v)?;
    let pred = argmax(&logits);
    let top = topk_channels(&v, &adjusted, pred, opts.topk)?;

    let w = adjusted.row(pred);
    let full_sum: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
    let relu_masked_sum: f64 = w.iter().zip(&v).map(|(a, b)| a * b.max(0.0)).sum();
    let reported_sum: f64 = top.channels.iter().map(|&(_, s)| s).sum();

    let entries = top
        .channels
        .iter()
        .map(|&(c, score)| {
            let coords = peak_cell(&zt, c, Sign::Positive);
            let recs = bank.records(c, Sign::Positive);
            ChannelEntry {
                channel: c,
                score,
                input_pixel_coords: coords,
                evidence_box: evidence_box(coords, zt.spatial(), opts.margin),
                prototypes: recs
                    .iter()
                    .take(opts.m)
                    .map(|r| PrototypeRef {
                        sample_id: r.sample_id.clone(),
                        activation: r.activation,
                        purity: r.purity,
                        pixel_coords: r.pixel_coords,
                        evidence_box: evidence_box(r.pixel_coords, r.grid, opts.margin),
                    })
                    .collect(),
            }
        })
        .collect();

    Ok(ExplanationReport {
        sample_id: sample_id.to_string(),
        predicted_class: pred,
        softmax: softmax(&logits),
        residual: ResidualIdentity {
            full_sum,
            bias: adjusted.bias_of(pred),
            predicted_logit: logits[pred],
            relu_masked_sum,
            reported_sum,
        },
        logits,
        entries,
        degenerate: top.degenerate,
        topk: opts.topk,
        m: opts.m,
        margin: opts.margin,
        transform_checksum: u.checksum(),
        bank_epoch_tag: bank.epoch_tag,
    })
}
