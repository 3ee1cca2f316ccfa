//! Viewing-time inference from video duration alone.
//!
//! A content provider is unwilling to share per-view metadata, but can ship
//! a handful of completion-ratio CDFs: for each of nine video-duration
//! buckets, the distribution of `omega = viewing_time / duration`. The
//! empirical shape is a power-law head `F(omega) = c omega^{-a}` with a
//! short linear tail up to the ceiling 1.05 (slightly above one, since
//! replays push the ratio past completion).
//!
//! Taken literally the published constants do not form a valid CDF, so a
//! fitted model is always repaired before use: the raw piecewise curve is
//! clamped to [0,1], projected onto nondecreasing functions (pool adjacent
//! violators), and rescaled so `F(1.05) = 1`. Sampling inverts the repaired
//! curve; an operator reconstructs a viewing time from a duration by one
//! table lookup and one draw.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::workload::HyperExpParams;

/// Completion ratios live on (0, 1.05]: up to 5% replay overshoot.
pub const DOC_CEILING: f64 = 1.05;

const GRID_POINTS: usize = 2048;

/// Raw parameters of the piecewise completion-ratio curve: power-law head
/// `c omega^{-a}` up to `1.05 - epsilon`, then a linear tail of span
/// `epsilon` ending at one, with intercept `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocParams {
    pub epsilon: f64,
    pub c: f64,
    pub a: f64,
    pub b: f64,
}

/// Published reference constants for the 0-50 s duration bucket, from the
/// large-scale measurement study. Kept verbatim for comparison only: the
/// labeling of `epsilon` is ambiguous in the source and the literal curve
/// is not monotone, so these constants do not construct a usable model.
pub fn reference_short_bucket_params() -> DocParams {
    DocParams {
        epsilon: 0.9460,
        c: 0.2733,
        a: 0.6383,
        b: 6.723,
    }
}

/// Piecewise curve before any repair.
pub fn raw_doc_cdf(params: &DocParams, omega: f64) -> f64 {
    let knee = DOC_CEILING - params.epsilon;
    if omega <= 0.0 {
        0.0
    } else if omega <= knee {
        params.c * omega.powf(-params.a)
    } else {
        let slope = (1.0 - params.c * knee.powf(-params.a)) / params.epsilon;
        slope * omega - params.b
    }
}

/// In-place L2 projection onto nondecreasing sequences (pool adjacent
/// violators).
fn isotonic_nondecreasing(values: &mut [f64]) {
    let n = values.len();
    let mut sums: Vec<f64> = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        sums.push(values[i]);
        counts.push(1);
        while sums.len() > 1 {
            let k = sums.len();
            let last = sums[k - 1] / counts[k - 1] as f64;
            let prev = sums[k - 2] / counts[k - 2] as f64;
            if prev <= last {
                break;
            }
            let s = sums.pop().unwrap();
            let c = counts.pop().unwrap();
            sums[k - 2] += s;
            counts[k - 2] += c;
        }
    }
    let mut pos = 0;
    for (s, c) in sums.into_iter().zip(counts) {
        let level = s / c as f64;
        for v in values[pos..pos + c].iter_mut() {
            *v = level;
        }
        pos += c;
    }
}

/// One duration bucket's completion-ratio model: raw parameters plus the
/// repaired CDF realized on a fixed omega grid.
#[derive(Debug, Clone)]
pub struct DocModel {
    /// Duration interval [lo, hi) in seconds; the last bucket is unbounded.
    pub bucket: (f64, f64),
    pub params: DocParams,
    /// Root-mean-square misfit against the empirical CDF (zero when built
    /// straight from parameters).
    pub fit_residual: f64,
    /// Fraction of fitted samples clamped down to the 1.05 ceiling.
    pub clamped_fraction: f64,
    grid: Vec<f64>,
}

impl DocModel {
    fn grid_omega(i: usize) -> f64 {
        DOC_CEILING * (i + 1) as f64 / GRID_POINTS as f64
    }

    /// Build a model from raw parameters, applying the normalization repair.
    pub fn from_params(bucket: (f64, f64), params: DocParams) -> Result<Self> {
        if !(params.epsilon > 0.0 && params.epsilon < DOC_CEILING) {
            return Err(Error::invalid(format!(
                "epsilon must lie in (0, {DOC_CEILING}), got {}",
                params.epsilon
            )));
        }
        let mut grid: Vec<f64> = (0..GRID_POINTS)
            .map(|i| raw_doc_cdf(&params, Self::grid_omega(i)).clamp(0.0, 1.0))
            .collect();
        isotonic_nondecreasing(&mut grid);
        let top = *grid.last().unwrap();
        if top <= 1e-9 {
            return Err(Error::DegenerateSample(
                "repaired completion-ratio CDF is identically zero".into(),
            ));
        }
        for v in &mut grid {
            *v /= top;
        }
        if grid[0] > 0.99 {
            return Err(Error::DegenerateSample(
                "repaired completion-ratio CDF is a point mass near zero".into(),
            ));
        }
        Ok(DocModel {
            bucket,
            params,
            fit_residual: 0.0,
            clamped_fraction: 0.0,
            grid,
        })
    }

    /// Least-squares fit of the piecewise curve to completion ratios
    /// observed in one bucket, followed by the normalization repair.
    pub fn fit(omegas: &[f64], bucket: (f64, f64)) -> Result<Self> {
        if omegas.len() < 500 {
            return Err(Error::invalid(format!(
                "bucket [{}, {}) has {} records, need at least 500",
                bucket.0,
                bucket.1,
                omegas.len()
            )));
        }
        let mut clamped = 0usize;
        let cleaned: Vec<f64> = omegas
            .iter()
            .map(|&w| {
                if w > DOC_CEILING {
                    clamped += 1;
                    DOC_CEILING
                } else {
                    w.max(1e-6)
                }
            })
            .collect();
        let spread = {
            let min = cleaned.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = cleaned.iter().cloned().fold(0.0f64, f64::max);
            max - min
        };
        if spread < 1e-6 {
            return Err(Error::DegenerateSample(format!(
                "completion ratios form a point mass at {:.3}",
                cleaned[0]
            )));
        }

        let points = crate::workload::empirical_quantile_grid(&cleaned, 256);
        // Given the tail span, head coefficients come from log-log least
        // squares and the tail intercept from linear least squares.
        let fit_for_epsilon = |epsilon: f64| -> Option<(f64, DocParams)> {
            if epsilon <= 0.0 || epsilon >= DOC_CEILING {
                return None;
            }
            let knee = DOC_CEILING - epsilon;
            let head: Vec<(f64, f64)> = points
                .iter()
                .filter(|&&(w, u)| w <= knee && u > 1e-6)
                .map(|&(w, u)| (w.ln(), u.ln()))
                .collect();
            if head.len() < 4 {
                return None;
            }
            let n = head.len() as f64;
            let sx: f64 = head.iter().map(|p| p.0).sum();
            let sy: f64 = head.iter().map(|p| p.1).sum();
            let sxx: f64 = head.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = head.iter().map(|p| p.0 * p.1).sum();
            let denom = n * sxx - sx * sx;
            if denom.abs() < 1e-12 {
                return None;
            }
            let slope = (n * sxy - sx * sy) / denom;
            let intercept = (sy - slope * sx) / n;
            let a = -slope;
            let c = intercept.exp();
            let s = (1.0 - c * knee.powf(-a)) / epsilon;
            let tail: Vec<&(f64, f64)> = points.iter().filter(|&&(w, _)| w > knee).collect();
            let b = if tail.is_empty() {
                s * DOC_CEILING - 1.0
            } else {
                tail.iter().map(|&&(w, u)| s * w - u).sum::<f64>() / tail.len() as f64
            };
            let params = DocParams { epsilon, c, a, b };
            let sse: f64 = points
                .iter()
                .map(|&(w, u)| {
                    let r = raw_doc_cdf(&params, w) - u;
                    r * r
                })
                .sum();
            Some((sse, params))
        };
        let mut best: Option<(f64, DocParams)> = None;
        let consider = |cand: Option<(f64, DocParams)>, best: &mut Option<(f64, DocParams)>| {
            if let Some((sse, params)) = cand {
                if best.map_or(true, |(b, _)| sse < b) {
                    *best = Some((sse, params));
                }
            }
        };
        for step in 1..52 {
            consider(fit_for_epsilon(0.02 * step as f64), &mut best);
        }
        if let Some((_, coarse)) = best {
            let center = coarse.epsilon;
            for step in -10i32..=10 {
                consider(fit_for_epsilon(center + 0.002 * step as f64), &mut best);
            }
        }
        let (sse, params) = best.ok_or_else(|| {
            Error::numerical("doc fit", "no epsilon candidate produced a fit")
        })?;
        let mut model = Self::from_params(bucket, params)?;
        model.fit_residual = (sse / points.len() as f64).sqrt();
        model.clamped_fraction = clamped as f64 / omegas.len() as f64;
        Ok(model)
    }

    /// Repaired CDF, interpolated on the grid.
    pub fn cdf(&self, omega: f64) -> f64 {
        if omega <= 0.0 {
            return 0.0;
        }
        if omega >= DOC_CEILING {
            return 1.0;
        }
        let pos = omega / DOC_CEILING * GRID_POINTS as f64 - 1.0;
        if pos <= 0.0 {
            return self.grid[0] * omega / Self::grid_omega(0);
        }
        let idx = pos.floor() as usize;
        let frac = pos - idx as f64;
        if idx + 1 >= GRID_POINTS {
            return self.grid[GRID_POINTS - 1];
        }
        self.grid[idx] * (1.0 - frac) + self.grid[idx + 1] * frac
    }

    /// Inverse-CDF draw of a completion ratio.
    pub fn sample_omega<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let idx = self.grid.partition_point(|&f| f < u);
        if idx == 0 {
            return Self::grid_omega(0);
        }
        if idx >= GRID_POINTS {
            return DOC_CEILING;
        }
        let f0 = self.grid[idx - 1];
        let f1 = self.grid[idx];
        let w0 = Self::grid_omega(idx - 1);
        let w1 = Self::grid_omega(idx);
        if f1 - f0 < 1e-15 {
            w1
        } else {
            w0 + (w1 - w0) * (u - f0) / (f1 - f0)
        }
    }

    /// Mean completion ratio of the repaired model.
    pub fn mean_omega(&self) -> f64 {
        let dw = DOC_CEILING / GRID_POINTS as f64;
        // E[w] = integral of (1 - F) over (0, ceiling].
        let mut acc = 0.0;
        let mut prev = self.grid[0];
        acc += (1.0 - prev) * Self::grid_omega(0);
        for i in 1..GRID_POINTS {
            let cur = self.grid[i];
            acc += (1.0 - 0.5 * (prev + cur)) * dw;
            prev = cur;
        }
        acc
    }
}

/// Ordered completion-ratio models over contiguous duration buckets.
#[derive(Debug, Clone)]
pub struct BucketTable {
    models: Vec<DocModel>,
}

/// Nine duration intervals in seconds; the last is open-ended.
pub fn default_bucket_boundaries() -> Vec<f64> {
    vec![0.0, 50.0, 100.0, 300.0, 500.0, 1000.0, 2000.0, 3000.0, 5000.0]
}

impl BucketTable {
    pub fn new(models: Vec<DocModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("bucket table must not be empty"));
        }
        if models[0].bucket.0 != 0.0 {
            return Err(Error::invalid("first bucket must start at duration 0"));
        }
        for pair in models.windows(2) {
            if pair[0].bucket.1 != pair[1].bucket.0 {
                return Err(Error::invalid(format!(
                    "buckets must be contiguous: [{}, {}) then [{}, {})",
                    pair[0].bucket.0, pair[0].bucket.1, pair[1].bucket.0, pair[1].bucket.1
                )));
            }
        }
        if models.last().unwrap().bucket.1.is_finite() {
            return Err(Error::invalid("last bucket must be unbounded"));
        }
        Ok(BucketTable { models })
    }

    /// Fit one model per bucket from (viewing_time, duration) pairs.
    pub fn fit(records: &[(f64, f64)], boundaries: &[f64]) -> Result<Self> {
        let mut models = Vec::with_capacity(boundaries.len());
        for (k, &lo) in boundaries.iter().enumerate() {
            let hi = boundaries.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let omegas: Vec<f64> = records
                .iter()
                .filter(|&&(_, d)| d >= lo && d < hi)
                .map(|&(v, d)| v / d)
                .collect();
            models.push(DocModel::fit(&omegas, (lo, hi))?);
        }
        Self::new(models)
    }

    pub fn models(&self) -> &[DocModel] {
        &self.models
    }

    pub fn lookup(&self, duration: f64) -> Result<&DocModel> {
        if !(duration > 0.0) {
            return Err(Error::invalid(format!(
                "duration must be positive, got {duration}"
            )));
        }
        self.models
            .iter()
            .find(|m| duration >= m.bucket.0 && duration < m.bucket.1)
            .ok_or_else(|| Error::invalid(format!("no bucket covers duration {duration}")))
    }

    /// Reconstruct a viewing time: draw a completion ratio from the
    /// duration's bucket and scale, capped at `1.05 * duration`.
    pub fn sample_viewing_time<R: Rng + ?Sized>(&self, duration: f64, rng: &mut R) -> Result<f64> {
        let model = self.lookup(duration)?;
        let omega = model.sample_omega(rng).min(DOC_CEILING);
        Ok(omega * duration)
    }

    /// Flat text, one line per bucket: `lo,hi,epsilon,c,a,b`.
    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.models {
            let hi = if m.bucket.1.is_finite() {
                m.bucket.1.to_string()
            } else {
                "inf".to_string()
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                m.bucket.0, hi, m.params.epsilon, m.params.c, m.params.a, m.params.b
            )?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut models = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 6 fields lo,hi,epsilon,c,a,b, got {}", fields.len()),
                });
            }
            let num = |raw: &str, what: &str| -> Result<f64> {
                if what == "hi" && raw.trim() == "inf" {
                    return Ok(f64::INFINITY);
                }
                raw.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("cannot parse {what} from {raw:?}"),
                })
            };
            let lo = num(fields[0], "lo")?;
            let hi = num(fields[1], "hi")?;
            let params = DocParams {
                epsilon: num(fields[2], "epsilon")?,
                c: num(fields[3], "c")?,
                a: num(fields[4], "a")?,
                b: num(fields[5], "b")?,
            };
            models.push(DocModel::from_params((lo, hi), params)?);
        }
        Self::new(models)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }
}

/// Probability that a view with estimated viewing time `t` is a short view;
/// the same Bayes rule the simulator uses for class assignment.
pub fn class_posterior(viewing_time: f64, params: &HyperExpParams) -> f64 {
    params.posterior_short(viewing_time)
}

/// Valid synthetic bucket models shaped like the measured ones: power-law
/// head plus a short linear tail, with the mean completion ratio falling
/// as the duration bucket grows.
pub fn synthetic_bucket_models(boundaries: &[f64]) -> Vec<DocModel> {
    let n = boundaries.len();
    (0..n)
        .map(|k| {
            let lo = boundaries[k];
            let hi = boundaries.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let frac = k as f64 / (n - 1) as f64;
            // Head exponent falls with the bucket: long videos are abandoned
            // early, short ones nearly completed.
            let p = 3.0 * (1.0 - frac) + 0.18 * frac;
            let epsilon = 0.10;
            let knee = DOC_CEILING - epsilon;
            // Mass below the knee grows with the bucket index.
            let head_mass = 0.55 + 0.42 * frac;
            // F(w) = head_mass (w/knee)^p on the head; in raw form
            // c w^{-a} with a = -p.
            let a = -p;
            let c = head_mass / knee.powf(p);
            let slope = (1.0 - c * knee.powf(-a)) / epsilon;
            let b = slope * DOC_CEILING - 1.0;
            DocModel::from_params((lo, hi), DocParams { epsilon, c, a, b })
                .expect("synthetic parameters form a valid model")
        })
        .collect()
}

/// Synthetic (duration, viewing_time) corpus drawn from the given bucket
/// models: durations log-uniform within their bucket, completion ratios
/// from the bucket's model.
pub fn synthesize_doc_records<R: Rng + ?Sized>(
    models: &[DocModel],
    records_per_bucket: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(models.len() * records_per_bucket);
    for model in models {
        let (lo, hi) = model.bucket;
        let lo = lo.max(1.0);
        let hi = if hi.is_finite() { hi } else { lo * 2.0 };
        for _ in 0..records_per_bucket {
            let u: f64 = rng.gen();
            let duration = lo * (hi / lo).powf(u);
            let omega = model.sample_omega(rng);
            out.push((duration, omega * duration));
        }
    }
    out
}
