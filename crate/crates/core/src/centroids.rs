//! Pre-designed Max-Mahalanobis centroids.
//!
//! The construction places `C` unit vectors in `R^d` so that every pair has
//! the same inner product `-1/(C-1)`, then scales them to radius `S`. The
//! result is fully deterministic: the first centroid is always `S·e1` and
//! each later centroid only uses the first `i` coordinates.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{check_dim, Error, Result};

/// Default radius of the centroid sphere.
pub const DEFAULT_SCALE: f64 = 10.0;

const RESIDUAL_TOL: f64 = 1e-9;

/// Class means `mu_1..mu_C` on a sphere of radius `scale` with equal pairwise angles.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    num_classes: usize,
    feature_dim: usize,
    scale: f64,
    /// Row-major `num_classes x feature_dim`.
    means: Vec<f64>,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Mean of class `k` (0-based).
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn means(&self) -> impl Iterator<Item = &[f64]> {
        self.means.chunks_exact(self.feature_dim)
    }

    pub fn check_class(&self, k: usize) -> Result<()> {
        if k < self.num_classes {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange {
                class: k,
                num_classes: self.num_classes,
            })
        }
    }

    /// Squared Euclidean distance from `z` to every centroid.
    pub fn sq_distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("feature vector", self.feature_dim, z.len())?;
        Ok(self
            .means()
            .map(|m| m.iter().zip(z).map(|(a, b)| (b - a) * (b - a)).sum())
            .collect())
    }

    /// Rebuilds a set from raw means, validating the norm and angle invariants.
    pub fn from_means(scale: f64, means: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = means.len();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(
                "a centroid set needs at least two classes".into(),
            ));
        }
        let feature_dim = means[0].len();
        let mut flat = Vec::with_capacity(num_classes * feature_dim);
        for m in &means {
            check_dim("centroid", feature_dim, m.len())?;
            flat.extend_from_slice(m);
        }
        let set = CentroidSet {
            num_classes,
            feature_dim,
            scale,
            means: flat,
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks the norm and equal-angle properties to 1e-9.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || self.num_classes > self.feature_dim + 1 {
            return Err(Error::Format("centroid set header out of range".into()));
        }
        let s2 = self.scale * self.scale;
        let target = -s2 / (self.num_classes as f64 - 1.0);
        for i in 0..self.num_classes {
            let norm = dot(self.mean(i), self.mean(i)).sqrt();
            if (norm - self.scale).abs() > RESIDUAL_TOL * self.scale {
                return Err(Error::Format(format!(
                    "centroid {i} has norm {norm}, expected {}",
                    self.scale
                )));
            }
            for j in 0..i {
                let ip = dot(self.mean(i), self.mean(j));
                if (ip - target).abs() > RESIDUAL_TOL * s2 {
                    return Err(Error::Format(format!(
                        "centroids {j} and {i} have inner product {ip}, expected {target}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the `mmd v1` text format.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "mmd v1 {} {} {}",
            self.num_classes,
            self.feature_dim,
            fmt_f64(self.scale)
        )?;
        for m in self.means() {
            let mut line = String::new();
            for (k, v) in m.iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", fmt_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Parses the `mmd v1` text format.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing mmd header".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "mmd" || fields[1] != "v1" {
            return Err(Error::Format(format!("bad mmd header: {header:?}")));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("bad header field {s:?}: {e}")))
        };
        let num_classes = parse_usize(fields[2])?;
        let feature_dim = parse_usize(fields[3])?;
        let scale: f64 = fields[4]
            .parse()
            .map_err(|e| Error::Format(format!("bad scale {:?}: {e}", fields[4])))?;
        let mut means = Vec::with_capacity(num_classes);
        for k in 0..num_classes {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing centroid row {k}")))??;
            let row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad value {t:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            check_dim("centroid row", feature_dim, row.len())?;
            means.push(row);
        }
        Self::from_means(scale, means)
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the Max-Mahalanobis centroid set for `num_classes` classes in
/// `feature_dim` dimensions on a sphere of radius `scale`.
pub fn generate_opt_means(
    num_classes: usize,
    feature_dim: usize,
    scale: f64,
) -> Result<CentroidSet> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if feature_dim < 1 {
        return Err(Error::InvalidArgument(
            "feature dimension must be positive".into(),
        ));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {scale}"
        )));
    }
    if num_classes > feature_dim + 1 {
        return Err(Error::Dimension {
            what: "centroid classes (C <= d + 1)",
            expected: feature_dim + 1,
            got: num_classes,
        });
    }

    let c = num_classes;
    let d = feature_dim;
    let cm1 = (c - 1) as f64;
    let mut mu = vec![vec![0.0f64; d]; c];
    mu[0][0] = 1.0;
    for i in 1..c {
        for j in 0..i {
            let ip = dot(&mu[i], &mu[j]);
            mu[i][j] = -(1.0 + ip * cm1) / (mu[j][j] * cm1);
        }
        let residual = 1.0 - dot(&mu[i], &mu[i]);
        if i < d {
            mu[i][i] = residual.max(0.0).sqrt();
        } else {
            // C = d + 1: the last centroid has no free coordinate left and is
            // already a unit vector.
            debug_assert!(residual.abs() <= RESIDUAL_TOL, "residual {residual}");
        }
    }

    let means = mu
        .into_iter()
        .flat_map(|row| row.into_iter().map(move |v| v * scale))
        .collect();
    Ok(CentroidSet {
        num_classes: c,
        feature_dim: d,
        scale,
        means,
    })
}

/// Cosine similarity between every pair of centroids.
pub fn pairwise_cosines(cs: &CentroidSet) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = cs.means().map(|m| dot(m, m).sqrt()).collect();
    (0..cs.num_classes)
        .map(|i| {
            (0..cs.num_classes)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        dot(cs.mean(i), cs.mean(j)) / (norms[i] * norms[j])
                    }
                })
                .collect()
        })
        .collect()
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest_centroid(cs: &CentroidSet, z: &[f64]) -> Result<usize> {
    Ok(argmin(&cs.sq_distances(z)?))
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = k;
        }
    }
    best
}
