//! EPT binary tensors, dataset manifests, and sample streaming.
//!
//! EPT layout (all integers unsigned 32-bit little-endian):
//!
//! ```text
//! "EPT1" | ndim | dim_0 .. dim_{ndim-1} | dtype (1 = f32) | payload (f32 LE, row-major)
//! ```
//!
//! Rank-3 feature maps use axis order `H, W, D` with `D` fastest-varying.
//! Head weights are rank-2 `N × D`, biases rank-1 `N`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::headmodel::ClassifierHead;

pub const MAGIC: &[u8; 4] = b"EPT1";
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => DTYPE_F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EptTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl EptTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if !(1..=3).contains(&dims.len()) {
            return Err(Error::contract(format!("EPT rank must be 1..=3, got {}", dims.len())));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "EPT payload has {} values, dims {:?} require {expected}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_tensor(t: &EptTensor, destination: &Path) -> Result<()> {
    atomic_write(destination, &t.to_bytes())
}

fn read_u32(reader: &mut impl Read, path: &Path, field: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(path, field, "file truncated"),
        _ => Error::io(path, e),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_header_from(reader: &mut impl Read, path: &Path) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(path, "magic", "file shorter than magic"),
        _ => Error::io(path, e),
    })?;
    if &magic != MAGIC {
        return Err(Error::format(
            path,
            "magic",
            format!("expected \"EPT1\", found {magic:?}"),
        ));
    }
    let ndim = read_u32(reader, path, "ndim")? as usize;
    if !(1..=3).contains(&ndim) {
        return Err(Error::format(path, "ndim", format!("rank {ndim} not in 1..=3")));
    }
    let dims = (0..ndim)
        .map(|_| read_u32(reader, path, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let dtype = read_u32(reader, path, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, "dtype", format!("unknown dtype code {dtype}")));
    }
    Ok(dims)
}

/// Reads only the header, returning the dims.
pub fn read_header(source: &Path) -> Result<Vec<usize>> {
    let f = File::open(source).map_err(|e| Error::io(source, e))?;
    read_header_from(&mut BufReader::new(f), source)
}

pub fn read_tensor(source: &Path) -> Result<EptTensor> {
    let bytes = std::fs::read(source).map_err(|e| Error::io(source, e))?;
    decode_tensor(&bytes, source)
}

/// Decodes an in-memory EPT image; `origin` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<EptTensor> {
    let mut cursor = bytes;
    let dims = read_header_from(&mut cursor, origin)?;
    let count: usize = dims.iter().product();
    let payload = cursor;
    if payload.len() != count * 4 {
        return Err(Error::format(
            origin,
            "payload",
            format!("declared {count} elements, found {} bytes", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EptTensor { dims, data })
}

pub fn read_feature(source: &Path) -> Result<FeatureTensor> {
    let t = read_tensor(source)?;
    if t.dims().len() != 3 {
        return Err(Error::format(
            source,
            "ndim",
            format!("feature map must be rank 3, got {:?}", t.dims()),
        ));
    }
    FeatureTensor::from_ept(&t)
}

/// Pooling layer sitting between the backbone and the linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<PathBuf>,
}

/// Dataset description shared with the exporter. Stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub num_classes: usize,
    pub channels: usize,
    #[serde(default)]
    pub pooling: Pooling,
    /// When false, samples may differ in `H, W` (channel count must still match).
    #[serde(default = "default_true")]
    pub uniform_spatial: bool,
    pub head_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_path: Option<PathBuf>,
    /// Free-form provenance recorded by exporters (preprocessing, backbone id).
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub provenance: std::collections::BTreeMap<String, String>,
    pub samples: Vec<SampleEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    root: PathBuf,
}

fn default_true() -> bool {
    true
}

impl Manifest {
    pub fn new(
        dataset_name: impl Into<String>,
        num_classes: usize,
        channels: usize,
        head_path: impl Into<PathBuf>,
        bias_path: Option<PathBuf>,
        samples: Vec<SampleEntry>,
    ) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            num_classes,
            channels,
            pooling: Pooling::Avg,
            uniform_spatial: true,
            head_path: head_path.into(),
            bias_path,
            provenance: Default::default(),
            samples,
            root: PathBuf::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, destination: &Path) -> Result<()> {
        atomic_write(destination, self.to_toml().as_bytes())
    }

    /// Parses without validation. Relative paths resolve against `root`.
    pub fn parse(text: &str, origin: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::format(origin, "manifest", e.to_string()))?;
        Ok(m.with_root(root))
    }

    /// Parses, validates every invariant, and sorts samples by id.
    pub fn load(source: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        let root = source.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut m = Self::parse(&text, source, root)?;
        m.validate()?;
        m.samples.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(m)
    }

    /// Checks every manifest invariant, reading feature headers but not payloads.
    /// All violations are collected into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.pooling != Pooling::Avg {
            problems.push("unsupported pooling: only average-pooling heads are supported".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be at least 1".to_string());
        }
        if self.channels == 0 {
            problems.push("channels must be at least 1".to_string());
        }
        if self.samples.is_empty() {
            problems.push("empty dataset: manifest lists no samples".to_string());
        }

        let head_path = self.resolve(&self.head_path);
        match read_header(&head_path) {
            Ok(dims) => {
                if dims.len() != 2 {
                    problems.push(format!("head: expected rank-2 weights, got dims {dims:?}"));
                } else {
                    if dims[0] != self.num_classes {
                        problems.push(format!(
                            "head: class mismatch, {} rows for num_classes {}",
                            dims[0], self.num_classes
                        ));
                    }
                    if dims[1] != self.channels {
                        problems.push(format!(
                            "head: channel mismatch, {} columns for channels {}",
                            dims[1], self.channels
                        ));
                    }
                }
            }
            Err(e) => problems.push(format!("head: {e}")),
        }
        if let Some(bias) = &self.bias_path {
            match read_header(&self.resolve(bias)) {
                Ok(dims) if dims == [self.num_classes] => {}
                Ok(dims) => problems.push(format!("bias: expected dims [{}], got {dims:?}", self.num_classes)),
                Err(e) => problems.push(format!("bias: {e}")),
            }
        }

        let mut seen = HashSet::new();
        let mut spatial: Option<(usize, usize)> = None;
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                problems.push(format!("duplicate id {:?}", s.id));
            }
            if s.label >= self.num_classes {
                problems.push(format!(
                    "sample {:?}: label out of range ({} >= {})",
                    s.id, s.label, self.num_classes
                ));
            }
            match read_header(&self.resolve(&s.feature_path)) {
                Ok(dims) => {
                    if dims.len() != 3 {
                        problems.push(format!("sample {:?}: feature map must be rank 3, got {dims:?}", s.id));
                        continue;
                    }
                    if dims[2] != self.channels {
                        problems.push(format!(
                            "sample {:?}: channel mismatch, {} channels for manifest channels {}",
                            s.id, dims[2], self.channels
                        ));
                    }
                    if dims[0] == 0 || dims[1] == 0 {
                        problems.push(format!("sample {:?}: empty spatial dims {dims:?}", s.id));
                    }
                    if self.uniform_spatial {
                        match spatial {
                            None => spatial = Some((dims[0], dims[1])),
                            Some(hw) if hw != (dims[0], dims[1]) => problems.push(format!(
                                "sample {:?}: spatial dims {}x{} differ from {}x{} (set uniform_spatial = false to allow)",
                                s.id, dims[0], dims[1], hw.0, hw.1
                            )),
                            Some(_) => {}
                        }
                    }
                }
                Err(e) => problems.push(format!("sample {:?}: {e}", s.id)),
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load_head(&self) -> Result<ClassifierHead> {
        let wpath = self.resolve(&self.head_path);
        let w = read_tensor(&wpath)?;
        let bias = match &self.bias_path {
            Some(b) => Some(read_tensor(&self.resolve(b))?),
            None => None,
        };
        ClassifierHead::from_ept(&w, bias.as_ref())
    }
}

/// Random access to an id-ordered collection of feature maps.
///
/// Index order is ascending sample id, so streaming `0..len()` visits samples
/// in id order exactly once.
pub trait FeatureStore: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn channels(&self) -> usize;

    fn sample_id(&self, index: usize) -> &str;

    fn label(&self, index: usize) -> usize;

    fn load(&self, index: usize) -> Result<FeatureTensor>;

    fn index_of(&self, id: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.sample_id(i) == id)
    }
}

impl FeatureStore for Manifest {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn sample_id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn label(&self, index: usize) -> usize {
        self.samples[index].label
    }

    fn load(&self, index: usize) -> Result<FeatureTensor> {
        let s = &self.samples[index];
        let t = read_feature(&self.resolve(&s.feature_path))?;
        if t.channels() != self.channels {
            return Err(Error::Validation(vec![format!(
                "sample {:?}: channel mismatch, {} channels for manifest channels {}",
                s.id,
                t.channels(),
                self.channels
            )]));
        }
        Ok(t)
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }
}

/// A [`FeatureStore`] that keeps every tensor in memory.
#[derive(Debug, Clone)]
pub struct InMemoryStore {
    channels: usize,
    samples: Vec<(String, usize, FeatureTensor)>,
}

impl InMemoryStore {
    /// Samples are re-sorted by id; ids must be unique and channels uniform.
    pub fn new(channels: usize, mut samples: Vec<(String, usize, FeatureTensor)>) -> Result<Self> {
        samples.sort_by(|a, b| a.0.cmp(&b.0));
        let mut problems = Vec::new();
        for pair in samples.windows(2) {
            if pair[0].0 == pair[1].0 {
                problems.push(format!("duplicate id {:?}", pair[0].0));
            }
        }
        for (id, _, t) in &samples {
            if t.channels() != channels {
                problems.push(format!("sample {id:?}: channel mismatch"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self { channels, samples })
    }

    pub fn tensor(&self, index: usize) -> &FeatureTensor {
        &self.samples[index].2
    }
}

impl FeatureStore for InMemoryStore {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn sample_id(&self, index: usize) -> &str {
        &self.samples[index].0
    }

    fn label(&self, index: usize) -> usize {
        self.samples[index].1
    }

    fn load(&self, index: usize) -> Result<FeatureTensor> {
        Ok(self.samples[index].2.clone())
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.binary_search_by(|s| s.0.as_str().cmp(id)).ok()
    }
}
