//! Standard depth-map error and accuracy measures over valid pixels.

use std::fmt;
use std::io::Write;

use crate::image::DepthMap;
use crate::{Error, Real, Result};

/// How the `log` column is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LogMetric {
    /// `sqrt(mean (ln d − ln d*)²)`
    #[default]
    Rms,
    /// `mean |ln d − ln d*|`
    MeanAbs,
}

impl std::str::FromStr for LogMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(LogMetric::Rms),
            "mean-abs" => Ok(LogMetric::MeanAbs),
            other => Err(Error::Domain(format!("unknown log metric {other:?} (rms or mean-abs)"))),
        }
    }
}

impl fmt::Display for LogMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogMetric::Rms => "rms",
            LogMetric::MeanAbs => "mean-abs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub rms: f64,
    pub log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

pub const CSV_HEADER: &str = "rms,log,absrel,sqrel,d1,d2,d3";

impl DepthMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.rms, self.log, self.abs_rel, self.sq_rel, self.delta1, self.delta2, self.delta3
        )
    }

    /// Unweighted mean over several evaluations (per-frame averaging).
    pub fn mean(rows: &[DepthMetrics]) -> Option<DepthMetrics> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&DepthMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(DepthMetrics {
            rms: avg(|m| m.rms),
            log: avg(|m| m.log),
            abs_rel: avg(|m| m.abs_rel),
            sq_rel: avg(|m| m.sq_rel),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
            pixels: rows.iter().map(|m| m.pixels).sum(),
        })
    }
}

impl fmt::Display for DepthMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.rms, self.log, self.abs_rel, self.sq_rel, self.delta1, self.delta2, self.delta3
        )
    }
}

/// Header line matching the [`Display`](fmt::Display) columns.
pub fn table_header() -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "rms(m)", "log", "abs.rel", "sq.rel", "d<1.25", "d<1.25^2", "d<1.25^3"
    )
}

pub fn evaluate<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<DepthMetrics> {
    evaluate_with(pred, gt, LogMetric::Rms)
}

/// Metrics over pixels valid in both maps. Thresholds are strict:
/// `max(d/d*, d*/d) < 1.25^k`.
pub fn evaluate_with<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, log_metric: LogMetric) -> Result<DepthMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let thresholds = [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    let (mut se, mut le, mut ar, mut sr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for i in 0..pred.values.len() {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        let d = pred.values[i].f64();
        let g = gt.values[i].f64();
        if !(d > 0.0 && d.is_finite()) || !(g > 0.0 && g.is_finite()) {
            return Err(Error::Domain(format!("nonpositive depth at valid pixel {i}: pred {d}, gt {g}")));
        }
        let e = d - g;
        se += e * e;
        let l = d.ln() - g.ln();
        le += match log_metric {
            LogMetric::Rms => l * l,
            LogMetric::MeanAbs => l.abs(),
        };
        ar += e.abs() / g;
        sr += e * e / g;
        let ratio = (d / g).max(g / d);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no pixel is valid in both prediction and ground truth".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rms: (se / nf).sqrt(),
        log: match log_metric {
            LogMetric::Rms => (le / nf).sqrt(),
            LogMetric::MeanAbs => le / nf,
        },
        abs_rel: ar / nf,
        sq_rel: sr / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        pixels: n,
    })
}

pub fn write_table<W: Write>(rows: &[(String, DepthMetrics)], out: &mut W) -> std::io::Result<()> {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    writeln!(out, "{:<width$} {}", "frame", table_header())?;
    for (name, m) in rows {
        writeln!(out, "{name:<width$} {m}")?;
    }
    Ok(())
}
