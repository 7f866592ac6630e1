//! CSV and image artifacts. Every CSV starts with a comment line naming the
//! config hash and seed, followed by a header row.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use gmmc::data::unit_to_pixel;
use gmmc::eval::{BucketStat, Histogram};
use gmmc::train::EpochRecord;

/// Provenance stamped on every CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn line(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Incrementally built CSV text.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(stamp: &Stamp, header: &str) -> Self {
        let mut text = stamp.line();
        text.push_str(header);
        text.push('\n');
        Csv { text }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.text.push(',');
            }
            self.text.push_str(f.as_ref());
            first = false;
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, &self.text)
    }
}

pub const EPOCH_HEADER: &str =
    "epoch,mode,beta,lr,loss_real,loss_sampled,train_acc,test_acc,seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn epoch_csv(stamp: &Stamp, records: &[EpochRecord], wall_time: bool) -> Csv {
    let mut csv = Csv::new(stamp, EPOCH_HEADER);
    for r in records {
        csv.row([
            r.epoch.to_string(),
            r.mode.to_string(),
            opt(r.beta),
            r.lr.to_string(),
            r.loss_real.to_string(),
            opt(r.loss_sampled),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
            if wall_time {
                format!("{:.3}", r.seconds)
            } else {
                String::new()
            },
        ]);
    }
    csv
}

pub fn calibration_csv(stamp: &Stamp, buckets: &[BucketStat]) -> Csv {
    let mut csv = Csv::new(stamp, "bucket,count,acc,conf");
    for (i, b) in buckets.iter().enumerate() {
        csv.row([
            (i + 1).to_string(),
            b.count.to_string(),
            b.acc.to_string(),
            b.conf.to_string(),
        ]);
    }
    csv
}

pub fn histogram_csv(stamp: &Stamp, h: &Histogram) -> Csv {
    let mut csv = Csv::new(stamp, "bin_lo,bin_hi,count_in,count_out");
    for k in 0..h.counts_in.len() {
        csv.row([
            h.edges[k].to_string(),
            h.edges[k + 1].to_string(),
            h.counts_in[k].to_string(),
            h.counts_out[k].to_string(),
        ]);
    }
    csv
}

/// Binary PPM grid of square grayscale images in `[-1, 1]`, one per cell,
/// separated by one-pixel black borders.
pub fn ppm_grid(images: &[&[f64]]) -> Option<Vec<u8>> {
    let first = images.first()?;
    let side = (first.len() as f64).sqrt().round() as usize;
    if side * side != first.len() || images.iter().any(|im| im.len() != first.len()) {
        return None;
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let width = cols * (side + 1) + 1;
    let height = rows * (side + 1) + 1;
    let mut pixels = vec![0u8; width * height];
    for (n, im) in images.iter().enumerate() {
        let (r0, c0) = ((n / cols) * (side + 1) + 1, (n % cols) * (side + 1) + 1);
        for i in 0..side {
            for j in 0..side {
                pixels[(r0 + i) * width + c0 + j] = unit_to_pixel(im[i * side + j]);
            }
        }
    }
    let mut header = String::new();
    write!(header, "P6\n{width} {height}\n255\n").unwrap();
    let mut out = header.into_bytes();
    out.reserve(pixels.len() * 3);
    for p in pixels {
        out.extend_from_slice(&[p, p, p]);
    }
    Some(out)
}
