//! Clinical and statistical glycemic metrics over a simulated trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimTrace;

/// Band edges in absolute mg/dL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub severe_low: f64,
    pub low: f64,
    pub tight_high: f64,
    pub high: f64,
    pub very_high: f64,
    /// Length of the post-meal window, minutes.
    pub postprandial_window: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            severe_low: 54.0,
            low: 70.0,
            tight_high: 140.0,
            high: 180.0,
            very_high: 250.0,
            postprandial_window: 240.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlycemicReport {
    pub tir_70_180: f64,
    pub titr_70_140: f64,
    pub tar_180_250: f64,
    pub tar_250: f64,
    pub tbr_54_70: f64,
    pub tbr_54: f64,
    pub max_g: f64,
    pub min_g: f64,
    pub mean_g: f64,
    pub sd_g: f64,
    pub iqr_g: f64,
    pub cv: f64,
    /// Mean over meals of the highest glucose inside each post-meal window.
    /// `None` when no meal window contains a sample.
    pub peak_postprandial: Option<f64>,
    pub max_u: f64,
    pub mean_step_time_ms: f64,
    pub estimated_a1c: f64,
    pub samples: usize,
}

/// Raw inputs of [`compute_report`], decoupled from the trace type.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub t: &'a [f64],
    /// Absolute glucose, mg/dL.
    pub g_abs: &'a [f64],
    pub u: &'a [f64],
    pub meal_starts: &'a [f64],
    pub mean_step_time_ms: f64,
}

pub fn estimated_a1c(mean_g: f64) -> f64 {
    (mean_g + 46.7) / 28.7
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn compute_from_samples(samples: &Samples<'_>, th: &Thresholds) -> Result<GlycemicReport> {
    let g = samples.g_abs;
    let n = g.len();
    if n == 0 {
        return Err(Error::Empty("trace has no samples"));
    }
    if samples.t.len() != n {
        return Err(Error::InvalidConfig(
            "time and glucose columns differ in length".into(),
        ));
    }

    let mut counts = [0usize; 6];
    for &v in g {
        let band = if v < th.severe_low {
            0
        } else if v < th.low {
            1
        } else if v <= th.high {
            2
        } else if v <= th.very_high {
            3
        } else {
            4
        };
        counts[band] += 1;
        if v >= th.low && v <= th.tight_high {
            counts[5] += 1;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;

    let mean = g.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = g.to_vec();
    sorted.sort_by(f64::total_cmp);

    let peaks: Vec<f64> = samples
        .meal_starts
        .iter()
        .filter_map(|&start| {
            samples
                .t
                .iter()
                .zip(g)
                .filter(|(t, _)| **t >= start && **t <= start + th.postprandial_window)
                .map(|(_, v)| *v)
                .reduce(f64::max)
        })
        .collect();
    let peak_postprandial =
        (!peaks.is_empty()).then(|| peaks.iter().sum::<f64>() / peaks.len() as f64);

    Ok(GlycemicReport {
        tir_70_180: pct(counts[2]),
        titr_70_140: pct(counts[5]),
        tar_180_250: pct(counts[3]),
        tar_250: pct(counts[4]),
        tbr_54_70: pct(counts[1]),
        tbr_54: pct(counts[0]),
        max_g: sorted[n - 1],
        min_g: sorted[0],
        mean_g: mean,
        sd_g: sd,
        iqr_g: quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
        cv: 100.0 * sd / mean,
        peak_postprandial,
        max_u: samples.u.iter().copied().fold(0.0, f64::max),
        mean_step_time_ms: samples.mean_step_time_ms,
        estimated_a1c: estimated_a1c(mean),
        samples: n,
    })
}

pub fn compute_report(
    trace: &SimTrace,
    meal_starts: &[f64],
    th: &Thresholds,
) -> Result<GlycemicReport> {
    let t: Vec<f64> = trace.rows.iter().map(|r| r.t_min).collect();
    let g: Vec<f64> = trace.rows.iter().map(|r| r.g_abs).collect();
    let u: Vec<f64> = trace.rows.iter().map(|r| r.u).collect();
    compute_from_samples(
        &Samples {
            t: &t,
            g_abs: &g,
            u: &u,
            meal_starts,
            mean_step_time_ms: trace.mean_step_time_ms(),
        },
        th,
    )
}

/// Display rows as (key, label), in table order.
pub const METRIC_ROWS: [(&str, &str); 16] = [
    ("tir_70_180", "TIR [70,180] [%]"),
    ("titr_70_140", "TITR [70,140] [%]"),
    ("tar_180_250", "TAR180 (180,250] [%]"),
    ("tar_250", "TAR250 >250 [%]"),
    ("tbr_54_70", "TBR70 [54,70) [%]"),
    ("tbr_54", "TBR54 <54 [%]"),
    ("max_g", "MAX [mg/dL]"),
    ("iqr_g", "IQR [mg/dL]"),
    ("min_g", "MIN [mg/dL]"),
    ("mean_g", "Mean G [mg/dL]"),
    ("sd_g", "SD G [mg/dL]"),
    ("cv", "CV [%]"),
    ("peak_postprandial", "Peak PP [mg/dL]"),
    ("estimated_a1c", "eA1c [%]"),
    ("max_u", "Max u [mU/min]"),
    ("mean_step_time_ms", "Comp. time [ms/step]"),
];

impl GlycemicReport {
    /// Values in [`METRIC_ROWS`] order; a missing peak is NaN.
    pub fn values(&self) -> [f64; 16] {
        [
            self.tir_70_180,
            self.titr_70_140,
            self.tar_180_250,
            self.tar_250,
            self.tbr_54_70,
            self.tbr_54,
            self.max_g,
            self.iqr_g,
            self.min_g,
            self.mean_g,
            self.sd_g,
            self.cv,
            self.peak_postprandial.unwrap_or(f64::NAN),
            self.estimated_a1c,
            self.max_u,
            self.mean_step_time_ms,
        ]
    }

    pub fn band_total(&self) -> f64 {
        self.tir_70_180 + self.tar_180_250 + self.tar_250 + self.tbr_54_70 + self.tbr_54
    }

    pub fn table(&self) -> String {
        comparison_table(&[("value", self)])
    }
}

fn format_metric(key: &str, v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else if key == "mean_step_time_ms" {
        format!("{v:.5}")
    } else {
        format!("{v:.2}")
    }
}

/// Side-by-side table with one column per named report.
pub fn comparison_table(columns: &[(&str, &GlycemicReport)]) -> String {
    let mut out = format!("{:<24}", "Metric");
    for (name, _) in columns {
        out.push_str(&format!(" {:>14}", name));
    }
    out.push('\n');
    let values: Vec<[f64; 16]> = columns.iter().map(|(_, r)| r.values()).collect();
    for (k, (key, label)) in METRIC_ROWS.iter().enumerate() {
        out.push_str(&format!("{label:<24}"));
        for v in &values {
            out.push_str(&format!(" {:>14}", format_metric(key, v[k])));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    /// Reports contributing to this metric.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub metric: String,
    #[serde(flatten)]
    pub stats: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub reports: usize,
    /// Set when only one report was aggregated and every SD is a placeholder 0.
    pub single_report: bool,
    pub metrics: Vec<MetricAggregate>,
}

impl AggregateReport {
    pub fn get(&self, key: &str) -> Option<&MeanSd> {
        self.metrics
            .iter()
            .find(|m| m.metric == key)
            .map(|m| &m.stats)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>24}\n",
            "Metric",
            format!("mean ± SD (N={})", self.reports)
        );
        for (key, label) in METRIC_ROWS {
            if let Some(s) = self.get(key) {
                let cell = if s.n == 0 {
                    "-".to_string()
                } else {
                    format!(
                        "{} ± {}",
                        format_metric(key, s.mean),
                        format_metric(key, s.sd)
                    )
                };
                out.push_str(&format!("{label:<24} {cell:>24}\n"));
            }
        }
        if self.single_report {
            out.push_str("note: single report, SD not defined\n");
        }
        out
    }
}

/// Sample mean and SD (n-1 denominator) per metric. NaN entries are skipped.
pub fn aggregate(reports: &[GlycemicReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate"));
    }
    let rows: Vec<[f64; 16]> = reports.iter().map(GlycemicReport::values).collect();
    let metrics = METRIC_ROWS
        .iter()
        .enumerate()
        .map(|(k, (key, _))| {
            let vals: Vec<f64> = rows.iter().map(|r| r[k]).filter(|v| !v.is_nan()).collect();
            let n = vals.len();
            let mean = if n == 0 {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / n as f64
            };
            let sd = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            MetricAggregate {
                metric: key.to_string(),
                stats: MeanSd { mean, sd, n },
            }
        })
        .collect();
    Ok(AggregateReport {
        reports: reports.len(),
        single_report: reports.len() == 1,
        metrics,
    })
}
