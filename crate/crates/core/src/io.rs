//! File formats: tensors, model checkpoints, run manifests and reports.
//! `docs/formats.md` is the normative byte-level description.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::metrics::{KdeConfig, MetricId, ScoreVector};
use crate::model::{Architecture, DenseLayer, MlpModel, ProbTensor};
use crate::selection::RetrainTrace;
use crate::stats::{CorrelationReport, DecileCurve};
use crate::tensor::Matrix;

pub const TENSOR_MAGIC: [u8; 4] = *b"DSTN";
pub const TENSOR_VERSION: u16 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"DSMD";
pub const MODEL_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
const MAX_RANK: usize = 8;

/// Environment variable that pins manifest timestamps for reproducible runs.
pub const SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

/// A dense float32 array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n =
            element_count(&dims).ok_or_else(|| FormatError::DimOverflow(dims.iter().map(|&d| d as u64).collect()))?;
        if n != data.len() {
            return Err(Error::shape("tensor payload", n, data.len()));
        }
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds {MAX_RANK}",
                dims.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_prob_tensor(t: &ProbTensor) -> Self {
        Tensor {
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    /// Class indices stored as exact float32 integers.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if let Some(&l) = labels.iter().find(|&&l| l >= 1 << 24) {
            return Err(Error::InvalidArgument(format!(
                "label {l} is not exactly representable"
            )));
        }
        Ok(Tensor {
            dims: vec![labels.len()],
            data: labels.iter().map(|&l| l as f32).collect(),
        })
    }

    fn expect_rank(&self, rank: usize, what: &'static str) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::shape(
                what,
                format!("rank {rank}"),
                format!("rank {}", self.dims.len()),
            ));
        }
        Ok(())
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        self.expect_rank(2, "matrix file")?;
        Matrix::new(self.dims[0], self.dims[1], self.data)
    }

    pub fn into_prob_tensor(self) -> Result<ProbTensor> {
        self.expect_rank(3, "probability tensor file")?;
        ProbTensor::new(self.dims[0], self.dims[1], self.dims[2], self.data)
    }

    pub fn into_labels(self) -> Result<Vec<usize>> {
        self.expect_rank(1, "label file")?;
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v < (1 << 24) as f32 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(FormatError::Malformed {
                        offset: 16 + 4 * i,
                        reason: format!("label {v} is not a non-negative integer"),
                    }))
                }
            })
            .collect()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated {
                offset: self.pos,
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let found = self.take(4).map_err(|_| FormatError::BadMagic {
            expected: expected.to_vec(),
            found: self.bytes.to_vec(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn version(&mut self, supported: u16) -> std::result::Result<(), FormatError> {
        let v = self.u16()?;
        if v != supported {
            return Err(FormatError::Version {
                found: v as u32,
                supported: supported as u32,
            });
        }
        Ok(())
    }

    fn checksum(&mut self, covered: std::ops::Range<usize>) -> std::result::Result<(), FormatError> {
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.bytes[covered]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        if self.pos != self.bytes.len() {
            return Err(FormatError::Trailing(self.pos));
        }
        Ok(())
    }
}

fn f32s_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.dims.len() + 4 * t.data.len() + 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let start = out.len();
    push_f32s(&mut out, &t.data);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    r.version(TENSOR_VERSION)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::Dtype(dtype));
    }
    let rank = r.u8()? as usize;
    if rank > MAX_RANK {
        return Err(FormatError::Malformed {
            offset: 7,
            reason: format!("rank {rank} exceeds {MAX_RANK}"),
        });
    }
    let raw: Vec<u64> = (0..rank).map(|_| r.u64()).collect::<std::result::Result<_, _>>()?;
    let dims: Vec<usize> = raw
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| FormatError::DimOverflow(raw.clone()))?;
    let n = element_count(&dims).ok_or_else(|| FormatError::DimOverflow(raw.clone()))?;
    let start = r.pos;
    let payload = r.take(n * 4)?;
    let data = f32s_le(payload);
    r.checksum(start..start + n * 4)?;
    Ok(Tensor { dims, data })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(decode_tensor(&read_bytes(path)?)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?.into_matrix()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_tensor(path, &Tensor::from_labels(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_tensor(path)?.into_labels()
}

pub fn write_prob_tensor(path: &Path, t: &ProbTensor) -> Result<()> {
    write_tensor(path, &Tensor::from_prob_tensor(t))
}

pub fn read_prob_tensor(path: &Path) -> Result<ProbTensor> {
    read_tensor(path)?.into_prob_tensor()
}

/// JSON header of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    architecture: Architecture,
    label_names: Option<Vec<String>>,
    train_seed: Option<u64>,
    parameter_count: usize,
}

pub fn encode_model(model: &MlpModel) -> Result<Vec<u8>> {
    let params: usize = model
        .layers()
        .iter()
        .map(|l| l.weights.data().len() + l.bias.len())
        .sum();
    let header = serde_json::to_vec(&CheckpointHeader {
        architecture: model.architecture().clone(),
        label_names: model.label_names().map(<[String]>::to_vec),
        train_seed: model.train_seed(),
        parameter_count: params,
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * params + 4);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for l in model.layers() {
        push_f32s(&mut out, l.weights.data());
        push_f32s(&mut out, &l.bias);
    }
    let crc = crc32fast::hash(&out[10..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let header_len = r.u32()? as usize;
    let header_bytes = r.take(header_len)?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| FormatError::Malformed {
        offset: 10,
        reason: format!("checkpoint header: {e}"),
    })?;
    let arch = header.architecture;
    arch.validate()?;
    let expected: usize = arch.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != header.parameter_count {
        return Err(FormatError::Malformed {
            offset: 10,
            reason: format!(
                "parameter_count {} disagrees with the architecture ({expected})",
                header.parameter_count
            ),
        }
        .into());
    }
    let mut layers = Vec::with_capacity(arch.layer_sizes.len() - 1);
    for w in arch.layer_sizes.windows(2) {
        let weights = f32s_le(r.take(4 * w[0] * w[1])?);
        let bias = f32s_le(r.take(4 * w[1])?);
        layers.push((w[0], w[1], weights, bias));
    }
    let blob_end = r.pos;
    r.checksum(10..blob_end)?;
    let layers = layers
        .into_iter()
        .map(|(fi, fo, w, b)| {
            Ok(DenseLayer {
                weights: Matrix::new(fi, fo, w)?,
                bias: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = MlpModel::from_layers(arch, layers)?;
    if let Some(names) = header.label_names {
        model.set_label_names(names)?;
    }
    model.set_train_seed(header.train_seed);
    Ok(model)
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    write_bytes(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    decode_model(&read_bytes(path)?)
}

/// Size and SHA-256 of a file referenced by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// File name without directories, so runs in different output
    /// directories stay comparable.
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let digest = Sha256::digest(&bytes);
        Ok(FileDigest {
            name: path
                .file_name()
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            bytes: bytes.len() as u64,
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamp {
    pub unix: i64,
    pub rfc3339: String,
    /// `"SOURCE_DATE_EPOCH"` when pinned by the environment, else `"clock"`.
    pub source: String,
}

impl Timestamp {
    pub fn now() -> Result<Self> {
        let (unix, source) = match std::env::var(SOURCE_DATE_EPOCH) {
            Ok(v) => (
                v.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::InvalidArgument(format!("{SOURCE_DATE_EPOCH}={v:?} is not an integer")))?,
                SOURCE_DATE_EPOCH,
            ),
            Err(_) => (
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs() as i64),
                "clock",
            ),
        };
        let rfc3339 = time::OffsetDateTime::from_unix_timestamp(unix)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .format(&time::format_description::well_known::Rfc3339)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Timestamp {
            unix,
            rfc3339,
            source: source.into(),
        })
    }
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Every configuration object that influenced the outputs.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub created: Timestamp,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Result<Self> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            created: Timestamp::now()?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

/// Score vectors of one batch of inputs, with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub manifest: RunManifest,
    /// Monte-Carlo passes; `None` when the tensor came from files.
    pub k: Option<usize>,
    pub dropout_rate: Option<f32>,
    pub kde: Option<KdeConfig>,
    /// Deterministic predicted class per input.
    pub predictions: Vec<usize>,
    pub scores: Vec<ScoreVector>,
}

impl ScoreFile {
    pub fn get(&self, m: MetricId) -> Result<&ScoreVector> {
        self.scores
            .iter()
            .find(|s| s.metric == m)
            .ok_or_else(|| Error::InvalidArgument(format!("score file has no {m} scores")))
    }

    /// `index,prediction,<metric>...` with one row per input.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,prediction");
        for s in &self.scores {
            out.push(',');
            out.push_str(s.metric.name());
        }
        out.push('\n');
        for (i, p) in self.predictions.iter().enumerate() {
            out.push_str(&format!("{i},{p}"));
            for s in &self.scores {
                out.push(',');
                out.push_str(&fmt_f64(s.values[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".into(), fmt_f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Anything `write_report` can persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "result", rename_all = "kebab-case")]
pub enum Report {
    Correlation(CorrelationReport),
    Curve(DecileCurve),
    Retrain(RetrainTrace),
}

/// A report as written to JSON: the manifest followed by the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub manifest: RunManifest,
    #[serde(flatten)]
    pub report: Report,
}

impl Report {
    /// CSV rendering. Retraining traces render one row per repetition and
    /// iteration; see [`retrain_epochs_csv`] for per-epoch curves.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Correlation(r) => {
                out.push_str("metric,kendall,distance,pearson,n\n");
                for m in &r.metrics {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        m.metric,
                        fmt_opt(m.kendall),
                        fmt_opt(m.distance),
                        fmt_opt(m.pearson),
                        m.n
                    ));
                }
            }
            Report::Curve(c) => {
                out.push_str("fraction,accuracy,mean_metric\n");
                for i in 0..c.fractions.len() {
                    out.push_str(&format!(
                        "{},{},{}\n",
                        fmt_f64(c.fractions[i]),
                        fmt_f64(c.cumulative_accuracy[i]),
                        fmt_f64(c.mean_metric_per_decile[i])
                    ));
                }
            }
            Report::Retrain(t) => {
                out.push_str("policy,repetition,iteration,train_size,accuracy\n");
                for rep in &t.repetitions {
                    for it in &rep.iterations {
                        out.push_str(&format!(
                            "{},{},{},{},{}\n",
                            t.policy.label(),
                            rep.repetition,
                            it.iteration,
                            it.train_size,
                            fmt_f64(it.test_accuracy)
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Per-epoch holdout accuracy of every retraining run.
pub fn retrain_epochs_csv(t: &RetrainTrace) -> String {
    let mut out = String::from("policy,repetition,iteration,epoch,val_accuracy\n");
    for rep in &t.repetitions {
        for it in &rep.iterations {
            for (e, a) in it.val_accuracy.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t.policy.label(),
                    rep.repetition,
                    it.iteration,
                    e + 1,
                    fmt_f64(*a)
                ));
            }
        }
    }
    out
}

/// Writes `report` as JSON (with the manifest inline) or CSV.
pub fn write_report(path: &Path, report: &Report, format: ReportFormat, manifest: &RunManifest) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(
            path,
            &ReportFile {
                manifest: manifest.clone(),
                report: report.clone(),
            },
        ),
        ReportFormat::Csv => write_text(path, &report.to_csv()),
    }
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    read_json(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
