//! Datasets: synthetic domain-shift generators, IDX image ingestion and
//! deterministic minibatch sampling.
//!
//! Labels are 1-based at every external boundary (files, CSV, docs) and
//! 0-based inside the crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Feature rows with optional labels.
///
/// Training code only ever receives an [`Unlabeled`] view of the target
/// domain; labels are reachable through [`Dataset::labels`], which only the
/// evaluation path calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    domain: Domain,
}

/// Features of a dataset with its labels stripped.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    features: &'a Matrix,
}

impl<'a> Unlabeled<'a> {
    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    /// `labels` are 0-based class indices.
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::Data(
                "dataset features contain non-finite values".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(bad) = l.iter().find(|y| **y >= num_classes) {
                return Err(Error::Data(format!(
                    "label {} outside 1..={num_classes}",
                    bad + 1
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain,
        })
    }

    /// Builds from 1-based labels.
    pub fn from_one_based(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        let labels = labels
            .map(|l| {
                l.into_iter()
                    .map(|y| {
                        y.checked_sub(1)
                            .ok_or_else(|| Error::Data("label 0 under 1-based convention".into()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Self::new(features, labels, num_classes, domain)
    }

    /// Same rows with a wider class range and a new domain tag.
    pub fn with_classes(self, num_classes: usize, domain: Domain) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::Data(format!(
                "cannot shrink {} classes to {num_classes}",
                self.num_classes
            )));
        }
        Ok(Self {
            num_classes,
            domain,
            ..self
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// 0-based labels; evaluation only.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn labels_one_based(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|y| y + 1).collect())
    }

    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled {
            features: &self.features,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    /// Random split into `(rest, held_out)` with `round(fraction·n)` held out.
    pub fn split(&self, fraction: f64, stream: &mut SeededStream) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        stream.shuffle(&mut idx);
        let k = ((self.len() as f64) * fraction).round() as usize;
        let (held, rest) = idx.split_at(k.min(self.len()));
        (self.subset(rest), self.subset(held))
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut c = vec![0; self.num_classes];
            for &y in l {
                c[y] += 1;
            }
            c
        })
    }
}

/// Gaussian classes in the source domain; the target is the same mixture
/// rotated (in the plane of the first two coordinates, about the origin),
/// translated, and reweighted by `target_proportions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_per_domain: usize,
    pub class_means: Vec<Vec<f64>>,
    /// One covariance per class; `None` means identity.
    #[serde(default)]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub target_proportions: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three classes in the plane; the target is rotated by 30°, shifted by a
    /// unit vector and label-shifted to (0.5, 0.3, 0.2).
    pub fn three_class_benchmark(seed: u64) -> Self {
        Self {
            num_classes: 3,
            n_per_domain: 1500,
            class_means: vec![vec![0.0, 2.0], vec![-1.75, -1.0], vec![1.75, -1.0]],
            covariances: None,
            rotation_deg: 30.0,
            translation: vec![1.0, 0.0],
            target_proportions: vec![0.5, 0.3, 0.2],
            noise_scale: 0.5,
            seed,
        }
    }

    fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<Vec<Matrix>> {
        let d = self.dim();
        let bad = |m: String| Err(Error::Parameter(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != d)
        {
            return bad("one mean of common dimension per class is required".into());
        }
        if d < 2 {
            return bad("rotation needs at least 2 feature dimensions".into());
        }
        if self.translation.len() != d {
            return bad(format!(
                "translation has {} entries, features {d}",
                self.translation.len()
            ));
        }
        if self.target_proportions.len() != self.num_classes
            || self.target_proportions.iter().any(|p| *p < 0.0)
            || (self.target_proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("target proportions must be a distribution over the classes".into());
        }
        if !(self.noise_scale > 0.0) {
            return bad("noise scale must be positive".into());
        }
        match &self.covariances {
            None => Ok(vec![Matrix::identity(d); self.num_classes]),
            Some(covs) => {
                if covs.len() != self.num_classes {
                    return bad("one covariance per class is required".into());
                }
                covs.iter()
                    .enumerate()
                    .map(|(c, rows)| {
                        let m = Matrix::from_rows(rows)?;
                        if m.shape() != (d, d) {
                            return Err(Error::Parameter(format!("covariance {c} is not {d}x{d}")));
                        }
                        cholesky(&m).ok_or_else(|| {
                            Error::Parameter(format!("covariance {c} is not positive definite"))
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Lower Cholesky factor, or `None` if the matrix is not symmetric positive definite.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 {
                return None;
            }
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let v = a[(i, i)] - s;
                if v <= 1e-12 {
                    return None;
                }
                l[(i, i)] = v.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn sample_gaussian(mean: &[f64], chol: &Matrix, scale: f64, s: &mut SeededStream) -> Vec<f64> {
    let eps: Vec<f64> = (0..mean.len()).map(|_| s.normal()).collect();
    mean.iter()
        .enumerate()
        .map(|(i, m)| m + scale * (0..=i).map(|k| chol[(i, k)] * eps[k]).sum::<f64>())
        .collect()
}

fn rotate_plane(x: &mut [f64], angle_rad: f64, center: (f64, f64)) {
    let (sn, cs) = angle_rad.sin_cos();
    let (a, b) = (x[0] - center.0, x[1] - center.1);
    x[0] = center.0 + cs * a - sn * b;
    x[1] = center.1 + sn * a + cs * b;
}

/// Labelled source and target domains with covariate and label shift.
/// Target labels are kept for evaluation only.
pub fn make_gaussian_shift(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let chols = spec.validate()?;
    let root = SeededStream::new(spec.seed);
    let m = spec.num_classes;
    let d = spec.dim();

    let mut s = root.substream("synthetic/source");
    let mut src_labels: Vec<usize> = (0..spec.n_per_domain).map(|i| i % m).collect();
    s.shuffle(&mut src_labels);
    let mut src = Vec::with_capacity(spec.n_per_domain * d);
    for &y in &src_labels {
        src.extend(sample_gaussian(
            &spec.class_means[y],
            &chols[y],
            spec.noise_scale,
            &mut s,
        ));
    }

    let mut t = root.substream("synthetic/target");
    let angle = spec.rotation_deg.to_radians();
    let mut tgt_labels = Vec::with_capacity(spec.n_per_domain);
    let mut tgt = Vec::with_capacity(spec.n_per_domain * d);
    for _ in 0..spec.n_per_domain {
        let u = t.next_f64();
        let mut acc = 0.0;
        let mut y = m - 1;
        for (c, p) in spec.target_proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                y = c;
                break;
            }
        }
        let mut x = sample_gaussian(&spec.class_means[y], &chols[y], spec.noise_scale, &mut t);
        rotate_plane(&mut x, angle, (0.0, 0.0));
        for (xi, ti) in x.iter_mut().zip(&spec.translation) {
            *xi += ti;
        }
        tgt_labels.push(y);
        tgt.extend(x);
    }
    let n = spec.n_per_domain;
    Ok((
        Dataset::new(
            Matrix::from_vec(n, d, src)?,
            Some(src_labels),
            m,
            Domain::Source,
        )?,
        Dataset::new(
            Matrix::from_vec(n, d, tgt)?,
            Some(tgt_labels),
            m,
            Domain::Target,
        )?,
    ))
}

fn moons(n: usize, noise: f64, s: &mut SeededStream) -> (Vec<f64>, Vec<usize>) {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    s.shuffle(&mut labels);
    let mut x = Vec::with_capacity(2 * n);
    for &y in &labels {
        let t = std::f64::consts::PI * s.next_f64();
        let (px, py) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(px + noise * s.normal());
        x.push(py + noise * s.normal());
    }
    (x, labels)
}

/// Two interleaving half circles; the target redraws the same geometry
/// rotated by `angle_deg` about the centre of the moons.
pub fn make_two_moons_rotated(
    n: usize,
    angle_deg: f64,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n < 4 {
        return Err(Error::Parameter(format!("two moons needs n >= 4, got {n}")));
    }
    let root = SeededStream::new(seed);
    let (xs, ys) = moons(n, noise, &mut root.substream("moons/source"));
    let (mut xt, yt) = moons(n, noise, &mut root.substream("moons/target"));
    let angle = angle_deg.to_radians();
    for p in xt.chunks_mut(2) {
        rotate_plane(p, angle, (0.5, 0.25));
    }
    Ok((
        Dataset::new(Matrix::from_vec(n, 2, xs)?, Some(ys), 2, Domain::Source)?,
        Dataset::new(Matrix::from_vec(n, 2, xt)?, Some(yt), 2, Domain::Target)?,
    ))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(Self {
            path,
            bytes: fs::read(path)?,
            pos: 0,
        })
    }

    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let Some(b) = self.bytes.get(self.pos..self.pos + 4) else {
            return self.err(self.pos, "truncated header");
        };
        let v = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        self.pos += 4;
        Ok(v)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32()?;
        if got != expected {
            return self.err(0, format!("magic 0x{got:08x}, expected 0x{expected:08x}"));
        }
        Ok(())
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        match self.bytes.get(self.pos..self.pos + len) {
            Some(b) => Ok(b),
            None => self.err(
                self.bytes.len(),
                format!("truncated body: need {len} bytes from offset {}", self.pos),
            ),
        }
    }
}

/// Area-average resampling of a `rows × cols` image to `side × side`.
fn downsample(pixels: &[u8], rows: usize, cols: usize, side: usize) -> Vec<f64> {
    // overlap of source cell [k, k+1) with output cell [o·r, (o+1)·r) in source units
    fn weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
        let r = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let (lo, hi) = (o as f64 * r, (o + 1) as f64 * r);
                (lo.floor() as usize..(hi.ceil() as usize).min(src))
                    .map(|k| (k, (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0)))
                    .filter(|(_, w)| *w > 0.0)
                    .collect()
            })
            .collect()
    }
    let wy = weights(rows, side);
    let wx = weights(cols, side);
    let area = (rows as f64 / side as f64) * (cols as f64 / side as f64);
    let mut out = Vec::with_capacity(side * side);
    for ys in &wy {
        for xs in &wx {
            let mut acc = 0.0;
            for &(y, a) in ys {
                for &(x, b) in xs {
                    acc += a * b * f64::from(pixels[y * cols + x]);
                }
            }
            out.push(acc / area / 255.0);
        }
    }
    out
}

/// Reads an IDX image/label pair, scales pixels to [0,1], area-averages each
/// image to `side × side` and keeps at most `limit` examples.
pub fn load_idx(images: &Path, labels: &Path, side: usize, limit: usize) -> Result<Dataset> {
    if side == 0 {
        return Err(Error::Parameter("downsample side must be positive".into()));
    }
    let mut img = IdxReader::open(images)?;
    img.magic(IDX_IMAGES_MAGIC)?;
    let n_img = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.body(n_img * rows * cols)?;

    let mut lab = IdxReader::open(labels)?;
    lab.magic(IDX_LABELS_MAGIC)?;
    let n_lab = lab.u32()? as usize;
    let raw_labels = lab.body(n_lab)?;
    if n_lab != n_img {
        return lab.err(4, format!("{n_lab} labels for {n_img} images"));
    }
    let num_classes = raw_labels
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);

    let n = n_img.min(limit);
    let mut feats = Vec::with_capacity(n * side * side);
    for i in 0..n {
        let px = &pixels[i * rows * cols..(i + 1) * rows * cols];
        feats.extend(downsample(px, rows, cols, side));
    }
    // stored digit d is the 0-based index of external label d + 1
    let labels = raw_labels[..n].iter().map(|&y| y as usize).collect();
    Dataset::new(
        Matrix::from_vec(n, side * side, feats)?,
        Some(labels),
        num_classes,
        Domain::Source,
    )
}

/// Writes the standard IDX pair for a set of 8-bit images.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    digits: &[u8],
) -> Result<()> {
    let n = digits.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(
            "pixel buffer does not match image count".into(),
        ));
    }
    let mut f = fs::File::create(images)?;
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    let mut f = fs::File::create(labels)?;
    for v in [IDX_LABELS_MAGIC, n as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(digits)?;
    Ok(())
}

/// Magic of the flat dataset cache ("CLDS").
pub const CACHE_MAGIC: u32 = 0x434c_4453;

/// Flat binary cache: a 16-byte big-endian header `(magic, n, d, M)`, then
/// `n·d` little-endian f64 features, then `n` little-endian u32 1-based labels
/// (0 when the dataset is unlabeled).
pub fn write_cache(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + ds.len() * (ds.dim() * 8 + 4));
    for v in [
        CACHE_MAGIC,
        ds.len() as u32,
        ds.dim() as u32,
        ds.num_classes as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for v in ds.features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..ds.len() {
        let y = ds.labels.as_ref().map_or(0, |l| l[i] as u32 + 1);
        buf.extend_from_slice(&y.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache(path: &Path, domain: Domain) -> Result<Dataset> {
    let mut r = IdxReader::open(path)?;
    r.magic(CACHE_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let m = r.u32()? as usize;
    let body = r.body(n * d * 8 + n * 4)?;
    let (fb, lb) = body.split_at(n * d * 8);
    let feats = fb
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let raw: Vec<usize> = lb
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let labels = if raw.iter().all(|y| *y == 0) && n > 0 {
        None
    } else {
        Some(raw)
    };
    Dataset::from_one_based(Matrix::from_vec(n, d, feats)?, labels, m, domain)
}

/// Endless minibatches of row indices: without replacement inside an epoch,
/// reshuffled at every epoch boundary. A tail shorter than `b` is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    epoch: usize,
    stream: SeededStream,
}

pub fn batch_iter(n: usize, b: usize, stream: SeededStream) -> Result<BatchSampler> {
    if b == 0 || b > n {
        return Err(Error::Parameter(format!("batch size {b} for {n} rows")));
    }
    Ok(BatchSampler {
        order: (0..n).collect(),
        pos: n,
        batch: b,
        epoch: 0,
        stream,
    })
}

impl BatchSampler {
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch > self.order.len() {
            self.stream.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        Some(out)
    }
}
