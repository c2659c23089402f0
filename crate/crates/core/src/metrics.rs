//! Image-quality metrics on radio maps and split-level aggregation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use thiserror::Error;

use crate::ingest::{decode_gray, EncodeConfig, Sample};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("reference map is identically zero")]
    ZeroReference,
    #[error("record {record}: {message}")]
    Predictor { record: String, message: String },
    #[error("record {record}: {source}")]
    Record {
        record: String,
        #[source]
        source: Box<MetricsError>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(&a.view(), &b.view())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    Zip::from(a).and(b).for_each(|x, y| sum += (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// `Σ(pred - truth)² / Σ truth²`.
pub fn nmse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    same_shape(&pred.view(), &truth.view())?;
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(pred).and(truth).for_each(|p, t| {
        num += (p - t) * (p - t);
        den += t * t;
    });
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(num / den)
}

/// `10·log10(r² / mse)`; identical inputs give `+∞`.
pub fn psnr(pred: &Array2<f64>, truth: &Array2<f64>, r: f64) -> Result<f64> {
    let m = mse(pred, truth)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (r * r / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub l: f64,
    /// Gaussian window side.
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalized separable Gaussian taps.
    fn taps(&self, side: usize) -> Vec<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..side)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" Gaussian filtering.
fn filter(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(r, c)| (0..k).map(|i| taps[i] * img[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(r, c)| (0..k).map(|i| taps[i] * rows[[r + i, c]]).sum::<f64>())
}

/// Mean of the local SSIM map over all full windows. The window shrinks
/// to the image side for images smaller than the configured window.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, cfg: &SsimConfig) -> Result<f64> {
    same_shape(&a.view(), &b.view())?;
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Ok(1.0);
    }
    let taps = cfg.taps(cfg.window.min(h).min(w).max(1));
    let mu_a = filter(a, &taps);
    let mu_b = filter(b, &taps);
    let aa = filter(&(a * a), &taps);
    let bb = filter(&(b * b), &taps);
    let ab = filter(&(a * b), &taps);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|&ma, &mb, &xa, &xb, &xab| {
            let va = xa - ma * ma;
            let vb = xb - mb * mb;
            let cov = xab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        });
    Ok(total / mu_a.len() as f64)
}

/// Domain in which maps are compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalDomain {
    Gray,
    /// Decoded pathloss in dB; ranges become `max_db - min_db`.
    Db(EncodeConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub record_id: String,
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    /// Mean over finite PSNR values; `+∞` when every sample is exact.
    pub psnr: f64,
    pub psnr_inf_count: usize,
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let finite: Vec<f64> = samples.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let psnr_inf_count = samples.len() - finite.len();
        let psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            nmse: mean(|s| s.nmse),
            rmse: mean(|s| s.rmse),
            ssim: mean(|s| s.ssim),
            psnr,
            psnr_inf_count,
            samples,
        }
    }

    /// `metric=value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "nmse={}", fmt_f64(self.nmse)).unwrap();
        writeln!(s, "rmse={}", fmt_f64(self.rmse)).unwrap();
        writeln!(s, "ssim={}", fmt_f64(self.ssim)).unwrap();
        writeln!(s, "psnr={}", fmt_f64(self.psnr)).unwrap();
        writeln!(s, "psnr_inf_count={}", self.psnr_inf_count).unwrap();
        writeln!(s, "samples={}", self.samples.len()).unwrap();
        s
    }

    /// Per-sample CSV with a header row.
    pub fn csv(&self) -> String {
        let mut s = String::from("record_id,nmse,rmse,ssim,psnr\n");
        for m in &self.samples {
            writeln!(
                s,
                "{},{},{},{},{}",
                m.record_id,
                fmt_f64(m.nmse),
                fmt_f64(m.rmse),
                fmt_f64(m.ssim),
                fmt_f64(m.psnr)
            )
            .unwrap();
        }
        s
    }

    pub fn write(&self, summary_path: &Path, csv_path: &Path) -> Result<()> {
        for (p, body) in [(summary_path, self.summary()), (csv_path, self.csv())] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            std::fs::write(p, body).map_err(|source| MetricsError::Io {
                path: p.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Parses a value written by the report (`inf` included).
pub fn parse_metric(v: &str) -> Option<f64> {
    match v.trim() {
        "inf" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

/// All four metrics for one prediction.
pub fn score(record_id: &str, pred: &Array2<f64>, truth: &Array2<f64>, domain: EvalDomain) -> Result<SampleMetrics> {
    let wrap = |e: MetricsError| MetricsError::Record {
        record: record_id.to_string(),
        source: Box::new(e),
    };
    let (p, t, range) = match domain {
        EvalDomain::Gray => (pred.clone(), truth.clone(), 1.0),
        EvalDomain::Db(enc) => {
            let d = |g: &Array2<f64>| {
                decode_gray(&g.mapv(|v| v.clamp(0.0, 1.0)), &enc).map_err(|e| MetricsError::Predictor {
                    record: record_id.to_string(),
                    message: e.to_string(),
                })
            };
            (d(pred)?, d(truth)?, enc.max_db - enc.min_db)
        }
    };
    let cfg = SsimConfig {
        l: range,
        ..SsimConfig::default()
    };
    Ok(SampleMetrics {
        record_id: record_id.to_string(),
        nmse: nmse(&p, &t).map_err(wrap)?,
        rmse: rmse(&p, &t).map_err(wrap)?,
        ssim: ssim(&p, &t, &cfg).map_err(wrap)?,
        psnr: psnr(&p, &t, range).map_err(wrap)?,
    })
}

/// Produces a gray map for a sample.
pub trait MapPredictor {
    fn predict_map(&self, sample: &Sample) -> std::result::Result<Array2<f64>, String>;
}

impl<F> MapPredictor for F
where
    F: Fn(&Sample) -> std::result::Result<Array2<f64>, String>,
{
    fn predict_map(&self, sample: &Sample) -> std::result::Result<Array2<f64>, String> {
        self(sample)
    }
}

/// Ground truth echoed back, for pipeline checks.
pub struct Passthrough;

impl MapPredictor for Passthrough {
    fn predict_map(&self, sample: &Sample) -> std::result::Result<Array2<f64>, String> {
        Ok(sample.gray.clone())
    }
}

/// Scores every sample in order and aggregates.
pub fn evaluate_split<P: MapPredictor + ?Sized>(predictor: &P, samples: &[Sample], domain: EvalDomain) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predictor.predict_map(s).map_err(|message| MetricsError::Predictor {
            record: s.record_id.clone(),
            message,
        })?;
        out.push(score(&s.record_id, &pred, &s.gray, domain)?);
    }
    Ok(EvalReport::from_samples(out))
}

/// [`evaluate_split`] with predictions already computed, in sample order.
pub fn evaluate_predictions(samples: &[Sample], preds: &[Array2<f64>], domain: EvalDomain) -> Result<EvalReport> {
    let out = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| score(&s.record_id, p, &s.gray, domain))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(out))
}
