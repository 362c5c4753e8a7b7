//! Matrix files and evaluation bundles.
//!
//! Matrix file layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `OODM`                  |
//! | 4      | 2    | version, `1`                  |
//! | 6      | 1    | dtype: `0` = f32, `1` = u32   |
//! | 7      | 1    | padding, `0`                  |
//! | 8      | 8    | rows                          |
//! | 16     | 8    | cols                          |
//! | 24     | 4·rows·cols | values, row-major      |
//!
//! A bundle is a JSON manifest pointing at matrix files relative to the
//! manifest's directory:
//!
//! ```json
//! {
//!   "id_train": {"features": "tr_h.oodm", "logits": "tr_o.oodm", "labels": "tr_y.oodm"},
//!   "id_test": {"features": "te_h.oodm", "logits": "te_o.oodm"},
//!   "ood": {"textures": {"features": "tx_h.oodm", "logits": "tx_o.oodm"}},
//!   "last_layer": {"weights": "w.oodm", "bias": "b.oodm"}
//! }
//! ```
//!
//! Feature paths and `last_layer` may be omitted all together, which gives a
//! logits-only bundle usable with the logit-based detectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OODM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// Relative tolerance of the `o = Wᵀh + b` consistency check.
pub const LOGIT_CONSISTENCY_RTOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U32 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

/// Dense row-major matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    rows: usize,
    cols: usize,
    data: MatrixData,
}

impl MatrixFile {
    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(rows, cols, MatrixData::F32(data))
    }

    pub fn from_u32(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        Self::new(rows, cols, MatrixData::U32(data))
    }

    pub fn new(rows: usize, cols: usize, data: MatrixData) -> Result<Self> {
        let len = match &data {
            MatrixData::F32(v) => v.len(),
            MatrixData::U32(v) => v.len(),
        };
        if rows.checked_mul(cols) != Some(len) {
            return Err(Error::Data(format!(
                "matrix shape {rows}x{cols} does not match {len} stored values"
            )));
        }
        if let MatrixData::F32(v) = &data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite value {} at flat index {i}",
                    v[i]
                )));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Rounds each entry to f32. Fails on non-finite entries.
    pub fn from_array(a: ArrayView2<f64>) -> Result<Self> {
        let data = a.iter().map(|&x| x as f32).collect();
        Self::from_f32(a.nrows(), a.ncols(), data)
    }

    pub fn from_labels(labels: &[u32]) -> Self {
        Self {
            rows: labels.len(),
            cols: 1,
            data: MatrixData::U32(labels.to_vec()),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            MatrixData::F32(_) => DType::F32,
            MatrixData::U32(_) => DType::U32,
        }
    }

    pub fn data(&self) -> &MatrixData {
        &self.data
    }

    /// Widens an f32 matrix to f64. `None` for u32 matrices.
    pub fn to_f64(&self) -> Option<Array2<f64>> {
        match &self.data {
            MatrixData::F32(v) => Some(
                Array2::from_shape_vec((self.rows, self.cols), v.iter().map(|&x| x as f64).collect())
                    .expect("shape checked on construction"),
            ),
            MatrixData::U32(_) => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            MatrixData::U32(v) => Some(v),
            MatrixData::F32(_) => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.rows * self.cols);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(0);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        match &self.data {
            MatrixData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MatrixData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a matrix file image. `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "truncated header: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dtype = match bytes[6] {
            0 => DType::F32,
            1 => DType::U32,
            other => return Err(bad(format!("unknown dtype code {other}"))),
        };
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let count = rows
            .checked_mul(cols)
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| bad(format!("shape {rows}x{cols} overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        let need = count
            .checked_mul(4)
            .ok_or_else(|| bad(format!("shape {rows}x{cols} overflows")))?;
        if payload.len() < need {
            return Err(bad(format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        if payload.len() > need {
            return Err(bad(format!(
                "{} trailing bytes after payload",
                payload.len() - need
            )));
        }
        let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype {
            DType::F32 => {
                let v: Vec<f32> = words.map(f32::from_le_bytes).collect();
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(bad(format!("non-finite value at flat index {i}")));
                }
                MatrixData::F32(v)
            }
            DType::U32 => MatrixData::U32(words.map(u32::from_le_bytes).collect()),
        };
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
            data,
        })
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &MatrixFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<MatrixFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MatrixFile::from_bytes(&bytes, path)
}

/// Features (optional) and logits for one split or OOD class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub set: SampleSet,
    pub labels: Vec<u32>,
}

/// Final linear layer, `o = Wᵀh + b` with `W` of shape `d × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LastLayer {
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.weights.nrows();
        (0..self.weights.ncols())
            .map(|c| {
                let col = self.weights.column(c);
                crate::reduce::pairwise_sum_by(d, |j| col[j] * h[j]) + self.bias[c]
            })
            .collect()
    }
}

/// Validated evaluation bundle. Fields are read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    id_train: TrainSet,
    id_test: SampleSet,
    ood_sets: BTreeMap<String, SampleSet>,
    last_layer: Option<LastLayer>,
}

impl EvalBundle {
    /// Builds and validates a bundle. Either every split carries features and
    /// `last_layer` is present, or no split carries features and it is absent.
    pub fn new(
        id_train: TrainSet,
        id_test: SampleSet,
        ood_sets: BTreeMap<String, SampleSet>,
        last_layer: Option<LastLayer>,
    ) -> Result<Self> {
        let b = Self {
            id_train,
            id_test,
            ood_sets,
            last_layer,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn id_train(&self) -> &TrainSet {
        &self.id_train
    }

    pub fn id_test(&self) -> &SampleSet {
        &self.id_test
    }

    /// OOD sets in lexical name order.
    pub fn ood_sets(&self) -> &BTreeMap<String, SampleSet> {
        &self.ood_sets
    }

    pub fn last_layer(&self) -> Option<&LastLayer> {
        self.last_layer.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.id_train.set.logits.ncols()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.id_train.set.features.as_ref().map(|f| f.ncols())
    }

    pub fn has_features(&self) -> bool {
        self.last_layer.is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.ood_sets.is_empty() {
            return Err(Error::Data("at least one OOD set required".into()));
        }
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Data("logit matrices have zero columns".into()));
        }
        let has_features = self.last_layer.is_some();
        let d = self.feature_dim();

        let named = std::iter::once(("id_train", &self.id_train.set))
            .chain(std::iter::once(("id_test", &self.id_test)))
            .chain(self.ood_sets.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, set) in named {
            if set.is_empty() {
                return Err(Error::Data(format!("set '{name}' is empty")));
            }
            if set.logits.ncols() != c {
                return Err(Error::Data(format!(
                    "dimension mismatch in set '{name}': logits have {} columns, expected {c}",
                    set.logits.ncols()
                )));
            }
            match (&set.features, has_features) {
                (Some(f), true) => {
                    if Some(f.ncols()) != d {
                        return Err(Error::Data(format!(
                            "dimension mismatch in set '{name}': features have {} columns, expected {}",
                            f.ncols(),
                            d.unwrap_or(0)
                        )));
                    }
                    if f.nrows() != set.logits.nrows() {
                        return Err(Error::Data(format!(
                            "set '{name}': {} feature rows but {} logit rows",
                            f.nrows(),
                            set.logits.nrows()
                        )));
                    }
                }
                (None, false) => {}
                (None, true) => {
                    return Err(Error::Data(format!("missing key: features for set '{name}'")))
                }
                (Some(_), false) => {
                    return Err(Error::Data(
                        "missing key: last_layer (required when features are given)".into(),
                    ))
                }
            }
        }

        let n_tr = self.id_train.set.len();
        if self.id_train.labels.len() != n_tr {
            return Err(Error::Data(format!(
                "id_train has {} labels for {n_tr} samples",
                self.id_train.labels.len()
            )));
        }
        if let Some((i, &y)) = self
            .id_train
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y as usize >= c)
        {
            return Err(Error::Data(format!(
                "label {y} at train index {i} out of range [0, {c})"
            )));
        }

        if let (Some(ll), Some(d)) = (&self.last_layer, d) {
            if ll.weights.dim() != (d, c) {
                return Err(Error::Data(format!(
                    "dimension mismatch in last_layer: weights are {:?}, expected ({d}, {c})",
                    ll.weights.dim()
                )));
            }
            if ll.bias.len() != c {
                return Err(Error::Data(format!(
                    "dimension mismatch in last_layer: bias has {} entries, expected {c}",
                    ll.bias.len()
                )));
            }
            self.check_logit_consistency(ll)?;
        }
        Ok(())
    }

    fn check_logit_consistency(&self, ll: &LastLayer) -> Result<()> {
        let feats = self.id_train.set.features.as_ref().expect("checked");
        let logits = &self.id_train.set.logits;
        // (relative excess over tolerance, index) of the worst sample
        let worst = (0..feats.nrows())
            .into_par_iter()
            .map(|i| {
                let h = feats.row(i).to_vec();
                let o = ll.logits(&h);
                let stored = logits.row(i);
                let err = o
                    .iter()
                    .zip(stored.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let scale = stored.iter().map(|x| x.abs()).fold(1.0, f64::max);
                (err / scale, i)
            })
            .reduce(|| (0.0, 0), |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        if worst.0 > LOGIT_CONSISTENCY_RTOL {
            return Err(Error::Data(format!(
                "stored train logits disagree with Wᵀh + b: worst sample index {} (relative error {:.3e} > {:.0e})",
                worst.1, worst.0, LOGIT_CONSISTENCY_RTOL
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    logits: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    logits: String,
    labels: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LastLayerEntry {
    weights: String,
    bias: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id_train: TrainEntry,
    id_test: SetEntry,
    ood: BTreeMap<String, SetEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    last_layer: Option<LastLayerEntry>,
}

fn load_f64(base: &Path, rel: &str) -> Result<Array2<f64>> {
    let path = base.join(rel);
    let m = read_matrix(&path)?;
    m.to_f64()
        .ok_or_else(|| Error::format(&path, "expected an f32 matrix"))
}

fn load_vector(base: &Path, rel: &str) -> Result<Array1<f64>> {
    let path = base.join(rel);
    let a = load_f64(base, rel)?;
    if a.nrows() != 1 && a.ncols() != 1 {
        return Err(Error::format(&path, format!("expected a vector, got {:?}", a.dim())));
    }
    Ok(Array1::from_iter(a.iter().copied()))
}

fn load_set(base: &Path, e: &SetEntry) -> Result<SampleSet> {
    Ok(SampleSet {
        features: e.features.as_deref().map(|p| load_f64(base, p)).transpose()?,
        logits: load_f64(base, &e.logits)?,
    })
}

/// Loads and validates the bundle described by a JSON manifest.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<EvalBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let labels_path = base.join(&manifest.id_train.labels);
    let labels_m = read_matrix(&labels_path)?;
    let labels = labels_m
        .as_u32()
        .ok_or_else(|| Error::format(&labels_path, "labels must be a u32 matrix"))?
        .to_vec();
    let id_train = TrainSet {
        set: SampleSet {
            features: manifest
                .id_train
                .features
                .as_deref()
                .map(|p| load_f64(base, p))
                .transpose()?,
            logits: load_f64(base, &manifest.id_train.logits)?,
        },
        labels,
    };
    let id_test = load_set(base, &manifest.id_test)?;
    let ood_sets = manifest
        .ood
        .iter()
        .map(|(k, e)| Ok((k.clone(), load_set(base, e)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let last_layer = manifest
        .last_layer
        .as_ref()
        .map(|e| {
            Ok::<_, Error>(LastLayer {
                weights: load_f64(base, &e.weights)?,
                bias: load_vector(base, &e.bias)?,
            })
        })
        .transpose()?;
    EvalBundle::new(id_train, id_test, ood_sets, last_layer)
}

/// Writes `bundle` as matrix files plus `manifest.json` under `dir` and
/// returns the manifest path. OOD sets are stored as `ood_<index>_*` files.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &EvalBundle) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, a: &Array2<f64>| -> Result<String> {
        write_matrix(dir.join(name), &MatrixFile::from_array(a.view())?)?;
        Ok(name.to_string())
    };
    let put_set = |prefix: &str, s: &SampleSet| -> Result<SetEntry> {
        Ok(SetEntry {
            features: s
                .features
                .as_ref()
                .map(|f| put(&format!("{prefix}_features.oodm"), f))
                .transpose()?,
            logits: put(&format!("{prefix}_logits.oodm"), &s.logits)?,
        })
    };
    let tr = put_set("id_train", &bundle.id_train.set)?;
    write_matrix(
        dir.join("id_train_labels.oodm"),
        &MatrixFile::from_labels(&bundle.id_train.labels),
    )?;
    let manifest = Manifest {
        id_train: TrainEntry {
            features: tr.features,
            logits: tr.logits,
            labels: "id_train_labels.oodm".into(),
        },
        id_test: put_set("id_test", &bundle.id_test)?,
        ood: bundle
            .ood_sets
            .iter()
            .enumerate()
            .map(|(i, (k, s))| Ok((k.clone(), put_set(&format!("ood_{i:04}"), s)?)))
            .collect::<Result<_>>()?,
        last_layer: bundle
            .last_layer
            .as_ref()
            .map(|ll| {
                Ok::<_, Error>(LastLayerEntry {
                    weights: put("last_layer_weights.oodm", &ll.weights)?,
                    bias: put(
                        "last_layer_bias.oodm",
                        &ll.bias.clone().insert_axis(ndarray::Axis(1)),
                    )?,
                })
            })
            .transpose()?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
