//! Labeled datasets in `[-1, 1]^D`: synthetic mixtures, IDX ingestion,
//! CSV export, stratified splits and in/out-of-distribution pairing.
//!
//! Class labels are 0-based everywhere in this crate.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::centroids::generate_opt_means;
use crate::error::{check_dim, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    source: String,
    num_classes: usize,
    dim: usize,
    /// Row-major `len x dim`.
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        dim: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "dataset dimension must be positive".into(),
            ));
        }
        check_dim("dataset inputs", labels.len() * dim, inputs.len())?;
        if let Some(v) = inputs.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "input value {v} outside [-1, 1]"
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes,
            });
        }
        Ok(LabeledDataset {
            name: name.into(),
            source: String::new(),
            num_classes,
            dim,
            inputs,
            labels,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.inputs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset made of the rows at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            name: name.into(),
            source: self.source.clone(),
            num_classes: self.num_classes,
            dim: self.dim,
            inputs,
            labels,
        }
    }

    /// Writes `label,x1,...,xD` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("label");
        for k in 1..=self.dim {
            header.push_str(&format!(",x{k}"));
        }
        writeln!(w, "{header}")?;
        for (x, y) in self.iter() {
            let mut line = y.to_string();
            for v in x {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). Lines starting
    /// with `#` are skipped. The class count is `max label + 1` unless given.
    pub fn read_csv<R: BufRead>(
        name: impl Into<String>,
        r: R,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let mut dim = None;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                saw_header = true;
                let cols = line.split(',').count();
                if !line.starts_with("label") || cols < 2 {
                    return Err(Error::Format(format!("bad CSV header {line:?}")));
                }
                dim = Some(cols - 1);
                continue;
            }
            let mut fields = line.split(',');
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            let y: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| bad("bad label"))?;
            let row = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            check_dim("CSV row", dim.unwrap_or(0), row.len())?;
            labels.push(y);
            inputs.extend(row);
        }
        let dim = dim.ok_or_else(|| Error::Format("empty CSV".into()))?;
        let num_classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        LabeledDataset::new(name, num_classes, dim, inputs, labels)
    }
}

/// Gaussian clusters around Max-Mahalanobis anchors (unit radius) in input
/// space, mapped affinely into `[-1, 1]^D`.
///
/// `spread` is the per-coordinate noise standard deviation in anchor units,
/// so the gap between two anchors is `sqrt(2 C / (C - 1))`.
pub fn synth_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "spread must be >= 0, got {spread}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "n_per_class must be positive".into(),
        ));
    }
    let anchors = generate_opt_means(num_classes, dim, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * n_per_class;
    let mut raw = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    // Classes are interleaved so that prefixes of the set stay balanced.
    for _ in 0..n_per_class {
        for y in 0..num_classes {
            for &a in anchors.mean(y) {
                let eps: f64 = StandardNormal.sample(&mut rng);
                raw.push(a + spread * eps);
            }
            labels.push(y);
        }
    }

    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in raw.chunks_exact(dim) {
        for k in 0..dim {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let half = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| 0.5 * (h - l))
        .fold(0.0f64, f64::max);
    let inv = if half > 0.0 { 1.0 / half } else { 1.0 };
    let inputs = raw
        .chunks_exact(dim)
        .flat_map(|row| {
            row.iter()
                .zip(&center)
                .map(|(v, c)| ((v - c) * inv).clamp(-1.0, 1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(LabeledDataset::new(
        format!("mixture-c{num_classes}-d{dim}"),
        num_classes,
        dim,
        inputs,
        labels,
    )?
    .with_source(format!("synthetic seed={seed} spread={spread}")))
}

/// Pads every input of `ds` to `dim` coordinates with independent
/// `N(0, noise^2)` values, clamped to `[-1, 1]`. The original coordinates
/// come first, so the data lies near a `ds.dim()`-dimensional plane.
pub fn embed(ds: &LabeledDataset, dim: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if dim < ds.dim {
        return Err(Error::InvalidArgument(format!(
            "cannot embed {}-dimensional data into {dim} dimensions",
            ds.dim
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(ds.len() * dim);
    for row in ds.inputs.chunks_exact(ds.dim) {
        inputs.extend_from_slice(row);
        for _ in ds.dim..dim {
            let eps: f64 = StandardNormal.sample(&mut rng);
            inputs.push((noise * eps).clamp(-1.0, 1.0));
        }
    }
    Ok(LabeledDataset::new(
        format!("{}-in{dim}", ds.name),
        ds.num_classes,
        dim,
        inputs,
        ds.labels.clone(),
    )?
    .with_source(format!(
        "{} embedded dim={dim} noise={noise} seed={seed}",
        ds.source
    )))
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("bad gzip stream in {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Parses raw IDX image bytes into `(count, rows*cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = read_be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4, "image")? as usize;
    let rows = read_be_u32(bytes, 8, "image")? as usize;
    let cols = read_be_u32(bytes, 12, "image")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(Error::Format(format!(
            "truncated image data: need {} bytes, have {}",
            count * dim,
            body.len()
        )));
    }
    Ok((count, dim, &body[..count * dim]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "truncated label data: need {count} bytes, have {}",
            body.len()
        )));
    }
    Ok(&body[..count])
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn idx_from_bytes(
    name: impl Into<String>,
    images: &[u8],
    labels: &[u8],
) -> Result<LabeledDataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "image/label count mismatch: {count} images, {} labels",
            labels.len()
        )));
    }
    if dim == 0 {
        return Err(Error::Format("images have zero pixels".into()));
    }
    let inputs = pixels.iter().map(|&p| pixel_to_unit(p)).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(name, num_classes, dim, inputs, labels)
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = open_maybe_gz(images_path)?;
    let labels = open_maybe_gz(labels_path)?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(idx_from_bytes(name, &images, &labels)?
        .with_source(format!("idx:{}", images_path.display())))
}

/// Encodes a dataset as IDX bytes with `rows x cols` images.
pub fn idx_to_bytes(ds: &LabeledDataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    check_dim("IDX image size", ds.dim(), rows * cols)?;
    if ds.num_classes() > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(ds.inputs.iter().map(|&v| unit_to_pixel(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(ds.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

pub fn write_idx_pair(
    ds: &LabeledDataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let (images, labels) = idx_to_bytes(ds, rows, cols)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

/// Stratified split: each class contributes `round(fraction * count)` test
/// examples, clamped so both sides keep at least one. Rows keep their
/// original order within each side.
pub fn split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; ds.len()];
    for (y, idx) in per_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {y} has fewer than 2 examples"
            )));
        }
        let n_test = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_test[i]);
    Ok((
        ds.subset(format!("{}-train", ds.name), &train_idx),
        ds.subset(format!("{}-test", ds.name), &test_idx),
    ))
}

/// Separates `held_out` classes into an out-of-distribution set. The
/// in-distribution labels are renumbered densely from 0 in their original
/// order; the out set keeps its original labels.
pub fn make_ood_pair(
    ds: &LabeledDataset,
    held_out: &[usize],
) -> Result<(LabeledDataset, LabeledDataset)> {
    let c = ds.num_classes();
    if held_out.is_empty() {
        return Err(Error::InvalidArgument("held-out class set is empty".into()));
    }
    let mut held = vec![false; c];
    for &y in held_out {
        if y >= c {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: c,
            });
        }
        held[y] = true;
    }
    let kept = held.iter().filter(|h| !**h).count();
    if kept == 0 {
        return Err(Error::InvalidArgument(
            "held-out classes must be a proper subset".into(),
        ));
    }
    let mut remap = vec![usize::MAX; c];
    let mut next = 0;
    for y in 0..c {
        if !held[y] {
            remap[y] = next;
            next += 1;
        }
    }
    let (out_idx, in_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| held[ds.labels[i]]);
    let mut in_set = ds.subset(format!("{}-in", ds.name), &in_idx);
    in_set.num_classes = kept;
    in_set.labels.iter_mut().for_each(|y| *y = remap[*y]);
    let out_set = ds.subset(format!("{}-out", ds.name), &out_idx);
    Ok((in_set, out_set))
}

pub fn read_csv_file(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let f = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ok(
        LabeledDataset::read_csv(name, BufReader::new(f), num_classes)?
            .with_source(format!("csv:{}", path.display())),
    )
}
