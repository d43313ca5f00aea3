//! Depth-metric suite: relative errors, RMS variants, log error, and the
//! three delta accuracy thresholds, at a configurable range cap.

use std::fs;
use std::path::Path;

use crate::error::EvalError;
use crate::tensor::Tensor;

/// Metric bundle over one image or an aggregated set. Mean-based fields
/// plus the valid-pixel count, which is what makes exact pixel-pooled
/// aggregation possible after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cap: f64,
    pub n_pixels: usize,
    pub rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// How to combine per-image reports.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum AggregateMode {
    /// Sum per-pixel terms over all images, divide by total valid pixels.
    #[default]
    PixelPooled,
    /// Unweighted mean of the per-image metrics.
    PerImage,
}

/// Compute every metric over the pixels whose ground truth lies in
/// [1, cap] meters. Predictions are clamped into the same range first so
/// the log metrics stay finite.
pub fn compute_metrics(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    cap: f64,
) -> Result<MetricsReport, EvalError> {
    if pred.shape() != gt.shape() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    let mut n = 0usize;
    let (mut rel, mut sq_rel, mut sq, mut sq_log, mut log10) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g = g as f64;
        if !(1.0..=cap).contains(&g) {
            continue;
        }
        // max/min also coerces a non-finite prediction to the range edge
        let p = (p as f64).max(1.0).min(cap);
        n += 1;
        let diff = p - g;
        rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dlog = p.ln() - g.ln();
        sq_log += dlog * dlog;
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyValidSet(cap));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        cap,
        n_pixels: n,
        rel: rel / nf,
        sq_rel: sq_rel / nf,
        rms: (sq / nf).sqrt(),
        rms_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
    })
}

/// Combine per-image reports taken at one cap. Pixel pooling recovers the
/// dataset-level means exactly: linear metrics pool as count-weighted
/// means, the RMS pair as the root of the count-weighted mean of squares.
pub fn aggregate(reports: &[MetricsReport], mode: AggregateMode) -> Result<MetricsReport, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if let Some(other) = reports.iter().find(|r| r.cap != first.cap) {
        return Err(EvalError::MixedCaps(first.cap, other.cap));
    }
    let total: usize = reports.iter().map(|r| r.n_pixels).sum();
    let out = match mode {
        AggregateMode::PixelPooled => {
            let tf = total as f64;
            let pool = |f: fn(&MetricsReport) -> f64| {
                reports.iter().map(|r| r.n_pixels as f64 * f(r)).sum::<f64>() / tf
            };
            MetricsReport {
                cap: first.cap,
                n_pixels: total,
                rel: pool(|r| r.rel),
                sq_rel: pool(|r| r.sq_rel),
                rms: pool(|r| r.rms * r.rms).sqrt(),
                rms_log: pool(|r| r.rms_log * r.rms_log).sqrt(),
                log10: pool(|r| r.log10),
                delta1: pool(|r| r.delta1),
                delta2: pool(|r| r.delta2),
                delta3: pool(|r| r.delta3),
            }
        }
        AggregateMode::PerImage => {
            let k = reports.len() as f64;
            let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            MetricsReport {
                cap: first.cap,
                n_pixels: total,
                rel: mean(|r| r.rel),
                sq_rel: mean(|r| r.sq_rel),
                rms: mean(|r| r.rms),
                rms_log: mean(|r| r.rms_log),
                log10: mean(|r| r.log10),
                delta1: mean(|r| r.delta1),
                delta2: mean(|r| r.delta2),
                delta3: mean(|r| r.delta3),
            }
        }
    };
    Ok(out)
}

/// Header plus one row per report; float formatting is shortest
/// round-trip, so parsing the file back reproduces the values exactly.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("cap,rel,sq_rel,rms,rms_log,log10,d1,d2,d3,n_pixels\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.cap, r.rel, r.sq_rel, r.rms, r.rms_log, r.log10, r.delta1, r.delta2, r.delta3, r.n_pixels
        ));
    }
    out
}

pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<(), EvalError> {
    fs::write(path, metrics_csv(reports))
        .map_err(|e| EvalError::Csv(format!("{}: {e}", path.display())))
}

/// Parse a file produced by [`metrics_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsReport>, EvalError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EvalError::Csv("empty input".into()))?;
    if header != "cap,rel,sq_rel,rms,rms_log,log10,d1,d2,d3,n_pixels" {
        return Err(EvalError::Csv(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(EvalError::Csv(format!(
                "row {}: expected 10 fields, found {}",
                i + 2,
                fields.len()
            )));
        }
        let f = |j: usize| -> Result<f64, EvalError> {
            fields[j]
                .parse()
                .map_err(|e| EvalError::Csv(format!("row {}: field {j}: {e}", i + 2)))
        };
        out.push(MetricsReport {
            cap: f(0)?,
            rel: f(1)?,
            sq_rel: f(2)?,
            rms: f(3)?,
            rms_log: f(4)?,
            log10: f(5)?,
            delta1: f(6)?,
            delta2: f(7)?,
            delta3: f(8)?,
            n_pixels: fields[9]
                .parse()
                .map_err(|e| EvalError::Csv(format!("row {}: n_pixels: {e}", i + 2)))?,
        });
    }
    Ok(out)
}
