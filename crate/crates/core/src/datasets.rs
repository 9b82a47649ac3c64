//! Synthetic Gaussian-blob problems and IDX-style dataset files.
//!
//! # IDX layout
//!
//! Both files are big-endian, as in the classic MNIST distribution:
//!
//! ```text
//! offset  size  field
//! 0       2     zero
//! 2       1     type code (0x08 = unsigned byte)
//! 3       1     rank R
//! 4       4*R   dims, u32 big-endian
//! 4+4R    ...   payload, one byte per element, row-major
//! ```
//!
//! The features file has rank >= 2 (`n × ...`, trailing dims are flattened)
//! and bytes are scaled to `[0, 1]` by dividing by 255. The labels file has
//! rank 1 and holds class indices.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{Dataset, Split};
use crate::tensor::{child_rng, seeded_shuffle, Matrix, Rng};

const NUISANCE_SCALE: f64 = 4.0;
const OVERLAP: f64 = 0.05;
/// Mode weights 1/m²: each class has one dominant and three rare modes.
const DESK_MODES: [f64; 4] = [1.0, 1.0 / 4.0, 1.0 / 9.0, 1.0 / 16.0];

/// Rejection-samples `count` centers in `[0.2, 0.8]` on the first
/// `informative` dimensions (0.5 elsewhere), pairwise at least `min_sep` apart.
pub fn place_centers(rng: &mut Rng, count: usize, d: usize, informative: usize, min_sep: f64) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    while centers.len() < count {
        let cand: Vec<f64> = (0..d)
            .map(|j| if j < informative { rng.gen_range(0.2..0.8) } else { 0.5 })
            .collect();
        if centers.iter().all(|o| sq_dist(o, &cand).sqrt() >= min_sep) {
            centers.push(cand);
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fractions of every class assigned to the train, test and pool splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub pool: f64,
}

impl SplitFractions {
    fn counts(&self, n: usize) -> [usize; 3] {
        let c = largest_remainder(&[self.train, self.test, self.pool], n);
        [c[0], c[1], c[2]]
    }
}

/// Splits `n` in proportion to `weights`; leftover units go to the largest
/// fractional parts, ties to the earlier entry.
fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    /// `(n_classes · modes) × dim`, class-major: row `c · modes + m` is mode
    /// `m` of class `c`.
    pub centers: Vec<Vec<f64>>,
    /// Relative weight of each mode within a class; empty means one mode.
    #[serde(default)]
    pub mode_weights: Vec<f64>,
    pub sigma: f64,
    /// Per-dimension multiplier on `sigma`; empty means 1 everywhere.
    #[serde(default)]
    pub dim_scale: Vec<f64>,
    /// Fraction of each mode drawn from the band between its center and the
    /// nearest center of another class instead of around its own center.
    pub overlap_factor: f64,
    pub splits: SplitFractions,
    pub seed: u64,
}

impl BlobSpec {
    /// The reference substrate: 10 classes in 20 dimensions, 800 points per
    /// class split 200/100/500 into train/test/pool.
    ///
    /// Every class is a mixture of four Gaussian modes with weights 1/m², so
    /// the rare modes are thinly sampled by a small training set. Only the
    /// first 5 dimensions separate the modes (centers at least 6σ apart);
    /// the remaining 15 are class-independent noise around 0.5 with
    /// 4σ spread. 5% of each mode lies on the segment towards the nearest
    /// mode of another class.
    pub fn desk(seed: u64) -> Self {
        let (c, d, informative, sigma) = (10usize, 20usize, 5usize, 0.05f64);
        let mut rng = child_rng(seed, "blob-centers", 0);
        let centers = place_centers(&mut rng, c * DESK_MODES.len(), d, informative, 6.0 * sigma);
        BlobSpec {
            n_classes: c,
            points_per_class: 800,
            dim: d,
            centers,
            mode_weights: DESK_MODES.to_vec(),
            sigma,
            dim_scale: (0..d)
                .map(|j| if j < informative { 1.0 } else { NUISANCE_SCALE })
                .collect(),
            overlap_factor: OVERLAP,
            splits: SplitFractions {
                train: 0.25,
                test: 0.125,
                pool: 0.625,
            },
            seed,
        }
    }

    pub fn modes(&self) -> usize {
        self.mode_weights.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("blobs need at least 2 classes".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {} (centers would be degenerate point masses)",
                self.sigma
            )));
        }
        if self.mode_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("mode weights must be positive".into()));
        }
        let rows = self.n_classes * self.modes();
        if self.centers.len() != rows || self.centers.iter().any(|c| c.len() != self.dim) {
            return Err(Error::shape(
                "blob centers",
                format!("{rows}x{}", self.dim),
                format!("{} rows", self.centers.len()),
            ));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("blob centers"));
        }
        if !self.dim_scale.is_empty()
            && (self.dim_scale.len() != self.dim || self.dim_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())))
        {
            return Err(Error::InvalidArgument(
                "dim_scale needs one positive entry per dimension".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_factor) {
            return Err(Error::InvalidArgument("overlap factor must lie in [0, 1]".into()));
        }
        let s = self.splits;
        if [s.train, s.test, s.pool].iter().any(|f| !(*f >= 0.0)) || s.train + s.test + s.pool <= 0.0 {
            return Err(Error::InvalidArgument(
                "split fractions must be non-negative and not all zero".into(),
            ));
        }
        if self.points_per_class == 0 {
            return Err(Error::InvalidArgument("points per class must be positive".into()));
        }
        Ok(())
    }
}

/// The generated splits. A split whose fraction yields no rows is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSplits {
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
    pub pool: Option<Dataset>,
}

impl BlobSplits {
    pub fn train(&self) -> Result<&Dataset> {
        self.train.as_ref().ok_or(Error::Empty("train split"))
    }

    pub fn test(&self) -> Result<&Dataset> {
        self.test.as_ref().ok_or(Error::Empty("test split"))
    }

    pub fn pool(&self) -> Result<&Dataset> {
        self.pool.as_ref().ok_or(Error::Empty("pool split"))
    }
}

/// Draws the blobs and splits every class by [`BlobSpec::splits`].
pub fn make_blobs(spec: &BlobSpec) -> Result<BlobSplits> {
    spec.validate()?;
    let (c, d, per) = (spec.n_classes, spec.dim, spec.points_per_class);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let counts = spec.splits.counts(per);
    let modes = spec.modes();
    let mode_counts = if spec.mode_weights.is_empty() {
        vec![per]
    } else {
        largest_remainder(&spec.mode_weights, per)
    };
    // Nearest center belonging to another class, per center row.
    let partner: Vec<usize> = (0..spec.centers.len())
        .map(|r| {
            (0..spec.centers.len())
                .filter(|&o| o / modes != r / modes)
                .min_by(|&a, &b| {
                    sq_dist(&spec.centers[r], &spec.centers[a])
                        .total_cmp(&sq_dist(&spec.centers[r], &spec.centers[b]))
                        .then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect();

    let mut parts: [(Vec<f32>, Vec<usize>); 3] = Default::default();
    for class in 0..c {
        let mut rng = child_rng(spec.seed, "blob-points", class as u64);
        let mut points: Vec<Vec<f32>> = Vec::with_capacity(per);
        for (m, &count) in mode_counts.iter().enumerate() {
            let row = class * modes + m;
            let center = &spec.centers[row];
            let n_overlap = (spec.overlap_factor * count as f64).round() as usize;
            for p in 0..count {
                let anchor: Vec<f64> = if p < n_overlap {
                    let t: f64 = rng.gen_range(0.3..0.7);
                    center
                        .iter()
                        .zip(&spec.centers[partner[row]])
                        .map(|(a, b)| a + t * (b - a))
                        .collect()
                } else {
                    center.clone()
                };
                points.push(
                    anchor
                        .iter()
                        .enumerate()
                        .map(|(j, mu)| {
                            let scale = spec.dim_scale.get(j).copied().unwrap_or(1.0);
                            (mu + scale * noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
                        })
                        .collect(),
                );
            }
        }
        let order = seeded_shuffle(per, &mut child_rng(spec.seed, "blob-split", class as u64));
        let mut start = 0;
        for (s, &cnt) in counts.iter().enumerate() {
            for &i in &order[start..start + cnt] {
                parts[s].0.extend_from_slice(&points[i]);
                parts[s].1.push(class);
            }
            start += cnt;
        }
    }

    let splits = [Split::Train, Split::Test, Split::Pool];
    let mut out: Vec<Option<Dataset>> = Vec::with_capacity(3);
    for ((data, labels), split) in parts.into_iter().zip(splits) {
        if labels.is_empty() {
            out.push(None);
            continue;
        }
        // Interleave classes deterministically so downstream prefixes are mixed.
        let n = labels.len();
        let perm = seeded_shuffle(n, &mut child_rng(spec.seed, "blob-order", split as u64));
        let m = Matrix::new(n, d, data)?;
        let shuffled_labels = perm.iter().map(|&i| labels[i]).collect();
        out.push(Some(Dataset::new(m.select_rows(&perm), shuffled_labels, c, split)?));
    }
    let pool = out.pop().unwrap();
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(BlobSplits { train, test, pool })
}

const IDX_UBYTE: u8 = 0x08;

fn idx_header(bytes: &[u8], what: &str) -> std::result::Result<(Vec<usize>, usize), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(FormatError::BadMagic {
            expected: vec![0, 0],
            found: bytes[..2].to_vec(),
        });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(FormatError::Malformed {
            offset: 2,
            reason: format!("{what}: type code {:#04x} is not unsigned byte (0x08)", bytes[2]),
        });
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(FormatError::Malformed {
            offset: 3,
            reason: format!("{what}: rank 0"),
        });
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            offset: 4,
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| FormatError::DimOverflow(dims.iter().map(|&d| d as u64).collect()))?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            offset: header,
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::Trailing(expected));
    }
    Ok((dims, header))
}

/// Parses IDX features and labels from memory.
pub fn parse_idx_like(features: &[u8], labels: &[u8], n_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let (fdims, fh) = idx_header(features, "features")?;
    if fdims.len() < 2 {
        return Err(FormatError::Malformed {
            offset: 3,
            reason: format!("features need rank >= 2, got {}", fdims.len()),
        }
        .into());
    }
    let (ldims, lh) = idx_header(labels, "labels")?;
    if ldims.len() != 1 {
        return Err(FormatError::Malformed {
            offset: 3,
            reason: format!("labels need rank 1, got {}", ldims.len()),
        }
        .into());
    }
    let n = fdims[0];
    if ldims[0] != n {
        return Err(FormatError::Malformed {
            offset: 4,
            reason: format!("label count {} does not match feature count {n}", ldims[0]),
        }
        .into());
    }
    let d: usize = fdims[1..].iter().product();
    let lab: Vec<usize> = labels[lh..].iter().map(|&b| b as usize).collect();
    let n_classes = match n_classes {
        Some(c) => c,
        None => lab.iter().max().map_or(0, |m| m + 1).max(2),
    };
    if let Some(i) = lab.iter().position(|&l| l >= n_classes) {
        return Err(FormatError::Malformed {
            offset: lh + i,
            reason: format!("label {} out of range for {n_classes} classes", lab[i]),
        }
        .into());
    }
    let data: Vec<f32> = features[fh..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::new(Matrix::new(n, d, data)?, lab, n_classes, split)
}

/// Reads an IDX features/labels file pair.
pub fn import_idx_like(features: &Path, labels: &Path, n_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let f = std::fs::read(features).map_err(|e| Error::io(features, e))?;
    let l = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx_like(&f, &l, n_classes, split)
}

/// Encodes a dataset as IDX bytes (features rank 2). Features are quantized
/// to `round(255 v)`; values outside `[0, 1]` or labels above 255 are errors.
pub fn encode_idx_like(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (n, d) = (data.len(), data.dim());
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")));
    let mut f = vec![0, 0, IDX_UBYTE, 2];
    f.extend(to_u32(n)?.to_be_bytes());
    f.extend(to_u32(d)?.to_be_bytes());
    for &v in data.features.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("feature {v} outside [0, 1]")));
        }
        f.push((v * 255.0).round() as u8);
    }
    let mut l = vec![0, 0, IDX_UBYTE, 1];
    l.extend(to_u32(n)?.to_be_bytes());
    for &lab in &data.labels {
        l.push(u8::try_from(lab).map_err(|_| Error::InvalidArgument(format!("label {lab} exceeds 255")))?);
    }
    Ok((f, l))
}

pub fn export_idx_like(data: &Dataset, features: &Path, labels: &Path) -> Result<()> {
    let (f, l) = encode_idx_like(data)?;
    std::fs::write(features, f).map_err(|e| Error::io(features, e))?;
    std::fs::write(labels, l).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
