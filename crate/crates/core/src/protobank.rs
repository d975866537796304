//! Channel activations, prototype selection, and purity.
//!
//! A positive prototype of channel `k` is one of the `m` samples with the
//! largest total activation of `k` in `Ẑ = U ⊛ Z`; a negative prototype uses
//! the negated activation. The prototypical pixel is the spatial cell where
//! channel `k` peaks, and purity is that pixel's share on `k`:
//! `max(p_k, 0) / ‖p‖₂`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::headmodel::{apply_transform, DisentanglementTransform};
use crate::tensorio::{atomic_write, FeatureStore};

/// Denominator guard for purity.
pub const PURITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub sample_id: String,
    pub channel: usize,
    pub activation: f64,
    pub pixel_coords: (usize, usize),
    /// Spatial dims `(H, W)` of the sample, needed to place evidence boxes.
    pub grid: (usize, usize),
    pub pixel_vector: Vec<f64>,
    pub purity: f64,
    pub sign: Sign,
}

fn check_channel(z: &FeatureTensor, k: usize) -> Result<()> {
    if k >= z.channels() {
        return Err(Error::contract(format!(
            "channel {k} out of range for {} channels",
            z.channels()
        )));
    }
    Ok(())
}

/// `Σ_h Σ_w Z[h, w, k]`.
pub fn channel_activation(z: &FeatureTensor, k: usize) -> Result<f64> {
    check_channel(z, k)?;
    Ok(z.pixels().map(|px| px[k]).sum())
}

fn all_activations(z: &FeatureTensor) -> Vec<f64> {
    let mut acc = vec![0.0; z.channels()];
    for px in z.pixels() {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc
}

/// Spatial argmax of `sign · Ẑ[·, ·, k]`, first occurrence in row-major order.
pub(crate) fn peak_cell(z: &FeatureTensor, k: usize, sign: Sign) -> (usize, usize) {
    let s = sign.factor();
    let mut best = (0, 0);
    let mut best_val = f64::NEG_INFINITY;
    for h in 0..z.height() {
        for w in 0..z.width() {
            let v = s * z.get(h, w, k);
            if v > best_val {
                best_val = v;
                best = (h, w);
            }
        }
    }
    best
}

/// Coordinates where channel `k` peaks (ties: smallest `h`, then `w`) and the pixel there.
pub fn prototypical_pixel(z: &FeatureTensor, k: usize) -> Result<((usize, usize), Vec<f64>)> {
    check_channel(z, k)?;
    let (h, w) = peak_cell(z, k, Sign::Positive);
    Ok(((h, w), z.pixel(h, w).to_vec()))
}

/// `max(p_k, 0) / max(‖p‖₂, ε)`.
pub fn pixel_purity(p: &[f64], k: usize) -> f64 {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    p[k].max(0.0) / norm.max(PURITY_EPS)
}

pub fn purity(z: &FeatureTensor, k: usize) -> Result<f64> {
    let (_, p) = prototypical_pixel(z, k)?;
    Ok(pixel_purity(&p, k))
}

/// Purity of a record of the given sign: negative records score `−p`.
pub(crate) fn signed_purity(p: &[f64], k: usize, sign: Sign) -> f64 {
    match sign {
        Sign::Positive => pixel_purity(p, k),
        Sign::Negative => {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            (-p[k]).max(0.0) / norm.max(PURITY_EPS)
        }
    }
}

fn make_record(id: &str, zt: &FeatureTensor, k: usize, activation: f64, sign: Sign) -> PrototypeRecord {
    let coords = peak_cell(zt, k, sign);
    let p = zt.pixel(coords.0, coords.1).to_vec();
    PrototypeRecord {
        sample_id: id.to_string(),
        channel: k,
        activation,
        pixel_coords: coords,
        grid: zt.spatial(),
        purity: signed_purity(&p, k, sign),
        pixel_vector: p,
        sign,
    }
}

/// Heap entry ordered so that `a > b` means `a` ranks ahead of `b`:
/// higher score first, then lower sample index.
#[derive(Debug, Clone)]
struct Ranked {
    score: f64,
    index: usize,
    record: PrototypeRecord,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Keeps the `limit` best-ranked entries seen so far.
#[derive(Debug, Clone)]
struct TopM {
    limit: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopM {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            heap: BinaryHeap::with_capacity(limit + 1),
        }
    }

    fn admits(&self, score: f64, index: usize) -> bool {
        if self.heap.len() < self.limit {
            return true;
        }
        let worst = &self.heap.peek().expect("non-empty at capacity").0;
        score.total_cmp(&worst.score).then_with(|| worst.index.cmp(&index)) == Ordering::Greater
    }

    fn push(&mut self, entry: Ranked) {
        if self.limit == 0 {
            return;
        }
        self.heap.push(Reverse(entry));
        if self.heap.len() > self.limit {
            self.heap.pop();
        }
    }

    fn merge(mut self, other: TopM) -> TopM {
        for Reverse(e) in other.heap {
            if self.admits(e.score, e.index) {
                self.push(e);
            }
        }
        self
    }

    fn into_sorted(self) -> Vec<PrototypeRecord> {
        // into_sorted_vec is ascending in Reverse order, i.e. best first.
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|Reverse(e)| e.record)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub records: Vec<PrototypeRecord>,
    /// Set when `m` exceeded the dataset size and the full ranking was returned.
    pub truncated: bool,
}

/// `sign · a` with -0.0 folded into 0.0, so exact ties fall back to sample order.
fn ranking_score(sign: Sign, a: f64) -> f64 {
    sign.factor() * a + 0.0
}

/// Top-`m` samples for channel `k` ranked by `sign · activ(U ⊛ Z; k)`.
pub fn select_prototypes<S: FeatureStore + ?Sized>(
    store: &S,
    u: &DisentanglementTransform,
    k: usize,
    m: usize,
    sign: Sign,
) -> Result<Selection> {
    if m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    if k >= u.dim() {
        return Err(Error::contract(format!(
            "channel {k} out of range for {} channels",
            u.dim()
        )));
    }
    let mut top = TopM::new(m);
    for i in 0..store.len() {
        let zt = apply_transform(u, &store.load(i)?)?;
        let a = channel_activation(&zt, k)?;
        let score = ranking_score(sign, a);
        if top.admits(score, i) {
            top.push(Ranked {
                score,
                index: i,
                record: make_record(store.sample_id(i), &zt, k, a, sign),
            });
        }
    }
    Ok(Selection {
        records: top.into_sorted(),
        truncated: m > store.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub m: usize,
    pub epoch_tag: usize,
    /// Per channel, best first.
    pub positive: Vec<Vec<PrototypeRecord>>,
    pub negative: Vec<Vec<PrototypeRecord>>,
    /// Set when `m` exceeded the dataset size.
    pub truncated: bool,
}

impl PrototypeBank {
    pub fn channels(&self) -> usize {
        self.positive.len()
    }

    pub fn records(&self, k: usize, sign: Sign) -> &[PrototypeRecord] {
        match sign {
            Sign::Positive => &self.positive[k],
            Sign::Negative => &self.negative[k],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positive.iter().all(Vec::is_empty)
    }

    pub fn positive_records(&self) -> impl Iterator<Item = &PrototypeRecord> {
        self.positive.iter().flatten()
    }

    /// Mean purity of channel `k`'s first `top` positive records.
    pub fn channel_mean_purity(&self, k: usize, top: usize) -> f64 {
        let recs = &self.positive[k][..top.min(self.positive[k].len())];
        if recs.is_empty() {
            return 0.0;
        }
        recs.iter().map(|r| r.purity).sum::<f64>() / recs.len() as f64
    }

    /// Mean purity over every positive record.
    pub fn mean_purity(&self) -> f64 {
        let (sum, n) = self
            .positive_records()
            .fold((0.0, 0usize), |(s, n), r| (s + r.purity, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn min_purity(&self) -> f64 {
        self.positive_records().map(|r| r.purity).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, "bank", e.to_string()))
    }
}

struct ChannelTops {
    positive: Vec<TopM>,
    negative: Vec<TopM>,
}

impl ChannelTops {
    fn new(d: usize, m: usize) -> Self {
        Self {
            positive: (0..d).map(|_| TopM::new(m)).collect(),
            negative: (0..d).map(|_| TopM::new(m)).collect(),
        }
    }

    fn offer(&mut self, id: &str, index: usize, zt: &FeatureTensor) {
        for (k, a) in all_activations(zt).into_iter().enumerate() {
            for (tops, sign) in [
                (&mut self.positive, Sign::Positive),
                (&mut self.negative, Sign::Negative),
            ] {
                let score = ranking_score(sign, a);
                if tops[k].admits(score, index) {
                    tops[k].push(Ranked {
                        score,
                        index,
                        record: make_record(id, zt, k, a, sign),
                    });
                }
            }
        }
    }

    fn merge(self, other: ChannelTops) -> ChannelTops {
        ChannelTops {
            positive: self
                .positive
                .into_iter()
                .zip(other.positive)
                .map(|(a, b)| a.merge(b))
                .collect(),
            negative: self
                .negative
                .into_iter()
                .zip(other.negative)
                .map(|(a, b)| a.merge(b))
                .collect(),
        }
    }
}

/// All channels' positive and negative top-`m` in one pass over the store.
///
/// Samples are scanned in parallel with per-worker bounded selections; the
/// merge respects the total (score, sample id) order, so the result does not
/// depend on the worker count.
pub fn build_bank<S: FeatureStore + ?Sized>(
    store: &S,
    u: &DisentanglementTransform,
    m: usize,
) -> Result<PrototypeBank> {
    if m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    if store.is_empty() {
        return Err(Error::Validation(vec![
            "empty dataset: no samples to select prototypes from".into(),
        ]));
    }
    let d = u.dim();
    if store.channels() != d {
        return Err(Error::contract(format!(
            "store has {} channels, transform is {d}x{d}",
            store.channels()
        )));
    }
    let tops = (0..store.len())
        .into_par_iter()
        .try_fold(
            || ChannelTops::new(d, m),
            |mut acc, i| -> Result<ChannelTops> {
                let zt = apply_transform(u, &store.load(i)?)?;
                acc.offer(store.sample_id(i), i, &zt);
                Ok(acc)
            },
        )
        .try_reduce(|| ChannelTops::new(d, m), |a, b| Ok(a.merge(b)))?;
    Ok(PrototypeBank {
        m,
        epoch_tag: 0,
        positive: tops.positive.into_iter().map(TopM::into_sorted).collect(),
        negative: tops.negative.into_iter().map(TopM::into_sorted).collect(),
        truncated: m > store.len(),
    })
}
