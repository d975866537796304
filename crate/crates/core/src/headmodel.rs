//! Frozen classifier-head algebra.
//!
//! The pipeline is `Z → U ⊛ Z → avg pool → A U⁻¹ · v + b`. Because pooling is
//! linear, `U⁻¹ · pool(U ⊛ Z) = pool(Z)` for any invertible `U`, so the
//! compensated head reproduces the original logits.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::tensorio::{atomic_write, read_tensor, write_tensor, EptTensor, FeatureStore};

/// Largest admissible 1-norm condition number for a free-mode transform.
pub const MAX_CONDITION: f64 = 1e8;
/// Tolerance on `max |UᵀU − I|` for orthogonal transforms.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
/// Tolerance on `max |U U⁻¹ − I|` for free transforms.
pub const INVERSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: DMatrix<f64>,
    bias: Option<Vec<f64>>,
}

impl ClassifierHead {
    pub fn new(weights: DMatrix<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("head weights must be finite"));
        }
        if let Some(b) = &bias {
            if b.len() != weights.nrows() {
                return Err(Error::contract(format!(
                    "bias has length {}, head has {} classes",
                    b.len(),
                    weights.nrows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("head bias must be finite"));
            }
        }
        Ok(Self { weights, bias })
    }

    /// Builds a head from row-major `N × D` weights.
    pub fn from_rows(classes: usize, channels: usize, rows: &[f64], bias: Option<Vec<f64>>) -> Result<Self> {
        if rows.len() != classes * channels {
            return Err(Error::contract("head row data does not match N x D"));
        }
        Self::new(DMatrix::from_row_slice(classes, channels, rows), bias)
    }

    pub fn from_ept(weights: &EptTensor, bias: Option<&EptTensor>) -> Result<Self> {
        let [n, d] = *weights.dims() else {
            return Err(Error::contract(format!(
                "head weights must be rank 2, got {:?}",
                weights.dims()
            )));
        };
        let rows: Vec<f64> = weights.data().iter().map(|&v| f64::from(v)).collect();
        let bias = match bias {
            Some(b) if b.dims().len() == 1 => Some(b.data().iter().map(|&v| f64::from(v)).collect()),
            Some(b) => return Err(Error::contract(format!("bias must be rank 1, got {:?}", b.dims()))),
            None => None,
        };
        Self::from_rows(n, d, &rows, bias)
    }

    pub fn weights_to_ept(&self) -> EptTensor {
        let (n, d) = self.weights.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(self.weights[(i, j)] as f32);
            }
        }
        EptTensor::new(vec![n, d], data).expect("shape matches")
    }

    pub fn bias_to_ept(&self) -> Option<EptTensor> {
        self.bias
            .as_ref()
            .map(|b| EptTensor::new(vec![b.len()], b.iter().map(|&v| v as f32).collect()).expect("rank 1"))
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn channels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_of(&self, class: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b[class])
    }

    pub fn row(&self, class: usize) -> Vec<f64> {
        self.weights.row(class).iter().copied().collect()
    }

    pub fn logits(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.channels() {
            return Err(Error::contract(format!(
                "pooled vector has length {}, head expects {}",
                pooled.len(),
                self.channels()
            )));
        }
        Ok((0..self.num_classes())
            .map(|c| {
                let dot: f64 = (0..self.channels()).map(|k| self.weights[(c, k)] * pooled[k]).sum();
                dot + self.bias_of(c)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    /// Cayley map of a skew-symmetric generator; `U⁻¹ = Uᵀ`.
    #[default]
    Orthogonal,
    /// Unconstrained `D × D` entries; inverse by pivoted LU.
    Free,
}

impl std::str::FromStr for TransformMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "free" => Ok(Self::Free),
            other => Err(format!("unknown mode {other:?} (expected orthogonal or free)")),
        }
    }
}

impl std::fmt::Display for TransformMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Orthogonal => "orthogonal",
            Self::Free => "free",
        })
    }
}

/// The invertible per-pixel channel mixing `U` with cached inverse.
#[derive(Debug, Clone)]
pub struct DisentanglementTransform {
    mode: TransformMode,
    dim: usize,
    params: Vec<f64>,
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    /// `(I + S)⁻¹` for orthogonal mode; needed to chain gradients through the Cayley map.
    resolvent: Option<DMatrix<f64>>,
}

pub fn num_params(mode: TransformMode, dim: usize) -> usize {
    match mode {
        TransformMode::Orthogonal => dim * dim.saturating_sub(1) / 2,
        TransformMode::Free => dim * dim,
    }
}

fn skew_from_params(dim: usize, params: &[f64]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(dim, dim);
    let mut idx = 0;
    for i in 0..dim {
        for j in (i + 1)..dim {
            s[(i, j)] = params[idx];
            s[(j, i)] = -params[idx];
            idx += 1;
        }
    }
    s
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn max_abs_identity_dev(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m[(i, j)] - target).abs());
        }
    }
    worst
}

/// Inverse by partial-pivot LU, refused when the 1-norm condition exceeds [`MAX_CONDITION`].
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let Some(inv) = m.clone().lu().try_inverse() else {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    };
    let condition = norm1(m) * norm1(&inv);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    Ok(inv)
}

impl DisentanglementTransform {
    /// `U = I` exactly, parameters all zero (free mode: the identity entries).
    pub fn identity(dim: usize, mode: TransformMode) -> Self {
        let params = match mode {
            TransformMode::Orthogonal => vec![0.0; num_params(mode, dim)],
            TransformMode::Free => DMatrix::<f64>::identity(dim, dim).transpose().as_slice().to_vec(),
        };
        Self {
            mode,
            dim,
            params,
            matrix: DMatrix::identity(dim, dim),
            inverse: DMatrix::identity(dim, dim),
            resolvent: (mode == TransformMode::Orthogonal).then(|| DMatrix::identity(dim, dim)),
        }
    }

    /// Materializes `U` from parameters.
    ///
    /// Orthogonal: upper-triangle generator entries, row-major. Free: all `D²`
    /// entries of `U`, row-major.
    pub fn from_params(mode: TransformMode, dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != num_params(mode, dim) {
            return Err(Error::contract(format!(
                "{mode} transform of dim {dim} needs {} params, got {}",
                num_params(mode, dim),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::contract("transform parameters must be finite"));
        }
        match mode {
            TransformMode::Orthogonal => {
                let s = skew_from_params(dim, &params);
                let eye = DMatrix::<f64>::identity(dim, dim);
                let resolvent = checked_inverse(&(&eye + &s))?;
                let matrix = (&eye - &s) * &resolvent;
                let dev = max_abs_identity_dev(&(matrix.transpose() * &matrix));
                if dev > ORTHOGONALITY_TOL {
                    return Err(Error::contract(format!("Cayley map lost orthogonality ({dev:.3e})")));
                }
                let inverse = matrix.transpose();
                Ok(Self {
                    mode,
                    dim,
                    params,
                    matrix,
                    inverse,
                    resolvent: Some(resolvent),
                })
            }
            TransformMode::Free => {
                let matrix = DMatrix::from_row_slice(dim, dim, &params);
                let inverse = checked_inverse(&matrix)?;
                let dev = max_abs_identity_dev(&(&matrix * &inverse));
                if dev > INVERSE_TOL {
                    return Err(Error::Singular {
                        condition: f64::INFINITY,
                    });
                }
                Ok(Self {
                    mode,
                    dim,
                    params,
                    matrix,
                    inverse,
                    resolvent: None,
                })
            }
        }
    }

    pub fn mode(&self) -> TransformMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `U · x` for one pixel.
    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.matrix[(i, j)] * x[j]).sum())
            .collect()
    }

    pub fn apply_inverse_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.inverse[(i, j)] * x[j]).sum())
            .collect()
    }

    /// Pulls a gradient with respect to the entries of `U` back to the parameters.
    pub fn chain_gradient(&self, grad_u: &DMatrix<f64>) -> Vec<f64> {
        match self.mode {
            TransformMode::Free => grad_u.transpose().as_slice().to_vec(),
            TransformMode::Orthogonal => {
                // U = (I - S)(I + S)⁻¹  ⇒  dU = -(I + U) dS (I + S)⁻¹
                // ⇒  ∂L/∂S = -(I + U)ᵀ G (I + S)⁻ᵀ
                let b = self.resolvent.as_ref().expect("orthogonal transform caches resolvent");
                let eye = DMatrix::<f64>::identity(self.dim, self.dim);
                let h = -((&eye + &self.matrix).transpose() * grad_u * b.transpose());
                let mut out = Vec::with_capacity(self.params.len());
                for i in 0..self.dim {
                    for j in (i + 1)..self.dim {
                        out.push(h[(i, j)] - h[(j, i)]);
                    }
                }
                out
            }
        }
    }

    /// SHA-256 over the little-endian bytes of `U` (row-major), hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for i in 0..self.dim {
            for j in 0..self.dim {
                hasher.update(self.matrix[(i, j)].to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_ept(&self) -> EptTensor {
        let mut data = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                data.push(self.matrix[(i, j)] as f32);
            }
        }
        EptTensor::new(vec![self.dim, self.dim], data).expect("square")
    }

    /// Writes `U` as a rank-2 EPT plus a JSON sidecar with mode and exact params.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(&self.to_ept(), path)?;
        let sidecar = TransformSidecar {
            mode: self.mode,
            dim: self.dim,
            params: self.params.clone(),
            checksum: self.checksum(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        atomic_write(&sidecar_path(path), text.as_bytes())
    }

    /// Loads from the sidecar (exact) and cross-checks the EPT matrix.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: TransformSidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, "sidecar", e.to_string()))?;
        let t = Self::from_params(sidecar.mode, sidecar.dim, sidecar.params)
            .map_err(|e| Error::format(&side, "params", e.to_string()))?;
        if t.checksum() != sidecar.checksum {
            return Err(Error::format(
                &side,
                "checksum",
                "sidecar params do not reproduce recorded checksum",
            ));
        }
        let ept = read_tensor(path)?;
        if ept.dims() != [t.dim, t.dim] {
            return Err(Error::format(
                path,
                "dims",
                format!("expected {0}x{0}, got {1:?}", t.dim, ept.dims()),
            ));
        }
        let stored = ept.data();
        for i in 0..t.dim {
            for j in 0..t.dim {
                if stored[i * t.dim + j] != t.matrix[(i, j)] as f32 {
                    return Err(Error::format(path, "payload", "matrix disagrees with sidecar params"));
                }
            }
        }
        Ok(t)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformSidecar {
    mode: TransformMode,
    dim: usize,
    params: Vec<f64>,
    checksum: String,
}

/// `Ẑ[x, y] = U · Z[x, y]` for every spatial cell.
pub fn apply_transform(u: &DisentanglementTransform, z: &FeatureTensor) -> Result<FeatureTensor> {
    if z.channels() != u.dim() {
        return Err(Error::contract(format!(
            "feature map has {} channels, transform is {}x{}",
            z.channels(),
            u.dim(),
            u.dim()
        )));
    }
    let d = u.dim();
    let m = u.matrix();
    let mut out = FeatureTensor::zeros(z.height(), z.width(), d);
    for (src, dst) in z.pixels().zip(out.pixels_mut()) {
        for (i, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &v) in src.iter().enumerate() {
                acc += m[(i, j)] * v;
            }
            *slot = acc;
        }
    }
    Ok(out)
}

/// Spatial mean per channel.
pub fn pool(z: &FeatureTensor) -> Result<Vec<f64>> {
    if z.num_pixels() == 0 {
        return Err(Error::contract("cannot pool a feature map with empty spatial dims"));
    }
    let mut acc = vec![0.0; z.channels()];
    for px in z.pixels() {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    let n = z.num_pixels() as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// `A' = A U⁻¹`, bias unchanged.
pub fn adjust_head(head: &ClassifierHead, u: &DisentanglementTransform) -> Result<ClassifierHead> {
    if head.channels() != u.dim() {
        return Err(Error::contract(format!(
            "head has {} channels, transform is {}x{}",
            head.channels(),
            u.dim(),
            u.dim()
        )));
    }
    ClassifierHead::new(head.weights() * u.inverse(), head.bias().map(<[f64]>::to_vec))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub class: usize,
}

/// Full compensated pipeline: `A' · pool(U ⊛ Z) + b`.
pub fn forward(z: &FeatureTensor, u: &DisentanglementTransform, adjusted: &ClassifierHead) -> Result<Prediction> {
    let pooled = pool(&apply_transform(u, z)?)?;
    let logits = adjusted.logits(&pooled)?;
    let class = argmax(&logits);
    Ok(Prediction { pooled, logits, class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub samples: usize,
    pub max_abs_logit_dev: f64,
    pub argmax_mismatches: usize,
}

impl PreservationReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.argmax_mismatches == 0 && self.max_abs_logit_dev <= tolerance
    }
}

/// Compares baseline logits `A · pool(Z) + b` with `A U⁻¹ · pool(U ⊛ Z) + b` on every sample.
pub fn verify_preservation<S: FeatureStore + ?Sized>(
    store: &S,
    head: &ClassifierHead,
    u: &DisentanglementTransform,
) -> Result<PreservationReport> {
    let adjusted = adjust_head(head, u)?;
    verify_with_adjusted(store, head, u, &adjusted)
}

/// Like [`verify_preservation`] but with an explicitly supplied compensated head.
pub fn verify_with_adjusted<S: FeatureStore + ?Sized>(
    store: &S,
    head: &ClassifierHead,
    u: &DisentanglementTransform,
    adjusted: &ClassifierHead,
) -> Result<PreservationReport> {
    let per_sample = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let z = store.load(i)?;
            let baseline = head.logits(&pool(&z)?)?;
            let transformed = forward(&z, u, adjusted)?;
            let dev = baseline
                .iter()
                .zip(&transformed.logits)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let mismatch = usize::from(argmax(&baseline) != transformed.class);
            Ok((dev, mismatch))
        })
        .collect::<Result<Vec<_>>>()?;
    let (max_abs_logit_dev, argmax_mismatches) = per_sample
        .into_iter()
        .fold((0.0f64, 0usize), |(d, m), (dv, mm)| (d.max(dv), m + mm));
    Ok(PreservationReport {
        samples: store.len(),
        max_abs_logit_dev,
        argmax_mismatches,
    })
}
