//! Depth benchmark metrics over ground-truth-valid pixels.
//!
//! Depths are in meters. RMSE and MAE are reported in millimeters, the
//! inverse-depth metrics in 1/km, the δ scores in percent.

use crate::camera::DepthMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Ground-truth-valid pixels evaluated.
    pub valid_count: usize,
    /// Valid pixels with non-positive prediction, left out of the inverse,
    /// relative and δ metrics.
    pub excluded: usize,
}

pub const RECORD_FIELDS: [&str; 10] = [
    "rmse",
    "mae",
    "irmse",
    "imae",
    "rel",
    "delta1",
    "delta2",
    "delta3",
    "valid_count",
    "excluded",
];

const THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dim(
            "evaluate",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let (mut n, mut m, mut excluded) = (0usize, 0usize, 0usize);
    let (mut sq, mut abs, mut isq, mut iabs, mut rel) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&p, &g), &ok) in pred.depth().iter().zip(gt.depth()).zip(gt.valid()) {
        if !ok {
            continue;
        }
        n += 1;
        let e = p - g;
        sq += e * e;
        abs += e.abs();
        if p <= 0.0 {
            excluded += 1;
            continue;
        }
        m += 1;
        let ie = 1000.0 / p - 1000.0 / g;
        isq += ie * ie;
        iabs += ie.abs();
        rel += e.abs() / g;
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(THRESHOLDS) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("ground truth has no valid pixels".into()));
    }
    if excluded > 0 {
        log::warn!("{excluded} valid pixels with non-positive prediction excluded from inverse and ratio metrics");
    }
    let (nf, mf) = (n as f64, m.max(1) as f64);
    Ok(MetricReport {
        rmse: 1000.0 * (sq / nf).sqrt(),
        mae: 1000.0 * abs / nf,
        irmse: (isq / mf).sqrt(),
        imae: iabs / mf,
        rel: rel / mf,
        delta1: 100.0 * hits[0] as f64 / mf,
        delta2: 100.0 * hits[1] as f64 / mf,
        delta3: 100.0 * hits[2] as f64 / mf,
        valid_count: n,
        excluded,
    })
}

/// Pools reports as if all their pixels had been evaluated together.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Contract("aggregate needs at least one report".into()));
    }
    if let [r] = reports {
        return Ok(*r);
    }
    let n: usize = reports.iter().map(|r| r.valid_count).sum();
    let excluded: usize = reports.iter().map(|r| r.excluded).sum();
    let m = n - excluded;
    let wn = |f: fn(&MetricReport) -> f64| -> f64 {
        reports.iter().map(|r| r.valid_count as f64 * f(r)).sum::<f64>() / n.max(1) as f64
    };
    let wm = |f: fn(&MetricReport) -> f64| -> f64 {
        reports
            .iter()
            .map(|r| (r.valid_count - r.excluded) as f64 * f(r))
            .sum::<f64>()
            / m.max(1) as f64
    };
    Ok(MetricReport {
        rmse: wn(|r| r.rmse * r.rmse).sqrt(),
        mae: wn(|r| r.mae),
        irmse: wm(|r| r.irmse * r.irmse).sqrt(),
        imae: wm(|r| r.imae),
        rel: wm(|r| r.rel),
        delta1: wm(|r| r.delta1),
        delta2: wm(|r| r.delta2),
        delta3: wm(|r| r.delta3),
        valid_count: n,
        excluded,
    })
}

impl MetricReport {
    fn values(&self) -> [String; 10] {
        [
            self.rmse.to_string(),
            self.mae.to_string(),
            self.irmse.to_string(),
            self.imae.to_string(),
            self.rel.to_string(),
            self.delta1.to_string(),
            self.delta2.to_string(),
            self.delta3.to_string(),
            self.valid_count.to_string(),
            self.excluded.to_string(),
        ]
    }

    /// One `name=value` line per metric.
    pub fn to_text(&self) -> String {
        RECORD_FIELDS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Tab-separated values in [`RECORD_FIELDS`] order.
    pub fn to_record(&self) -> String {
        self.values().join("\t")
    }

    pub fn record_header() -> String {
        RECORD_FIELDS.join("\t")
    }

    pub fn parse_record(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
        let bad = || Error::Contract(format!("malformed metric record {line:?}"));
        if f.len() != RECORD_FIELDS.len() {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let c = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        Ok(Self {
            rmse: x(0)?,
            mae: x(1)?,
            irmse: x(2)?,
            imae: x(3)?,
            rel: x(4)?,
            delta1: x(5)?,
            delta2: x(6)?,
            delta3: x(7)?,
            valid_count: c(8)?,
            excluded: c(9)?,
        })
    }
}
