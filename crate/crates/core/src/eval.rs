//! Energy metrics, the three-way ablation and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(invalid(format!("{} predictions for {} groundtruth values", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / gt.len() as f64)
}

/// Percent. Samples with non-positive groundtruth are skipped with a warning.
pub fn mape(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > 0.0)
        .fold((0.0, 0usize), |(s, n), (p, g)| (s + (p - g).abs() / g, n + 1));
    if n < gt.len() {
        log::warn!("mape: excluded {} samples with non-positive groundtruth", gt.len() - n);
    }
    if n == 0 {
        return Err(invalid("mape: every groundtruth value is non-positive"));
    }
    Ok(100.0 * sum / n as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// MAE as a percentage of the mean groundtruth.
pub fn maeom_from(mae: f64, mean_gt: f64) -> Result<f64> {
    if !(mean_gt > 0.0) {
        return Err(invalid("maeom: mean groundtruth must be positive"));
    }
    Ok(100.0 * mae / mean_gt)
}

pub fn maeom(pred: &[f64], gt: &[f64]) -> Result<f64> {
    maeom_from(mae(pred, gt)?, mean(gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae_kcal: f64,
    pub mape_pct: f64,
    pub maeom_pct: f64,
    pub mean_gt_kcal: f64,
}

impl MetricsReport {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self> {
        let mae_kcal = mae(pred, gt)?;
        let mean_gt_kcal = mean(gt);
        Ok(Self {
            n: gt.len(),
            mae_kcal,
            mape_pct: mape(pred, gt)?,
            maeom_pct: maeom_from(mae_kcal, mean_gt_kcal)?,
            mean_gt_kcal,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationConfig {
    /// Backbone with a direct energy head.
    Module2Only,
    /// Density times unrefined voxel volume.
    Module1_2,
    Full,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 3] = [Self::Module2Only, Self::Module1_2, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::Module2Only => "module2_only",
            Self::Module1_2 => "module1_2",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| invalid(format!("unknown configuration `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Predicted and groundtruth energy per evaluated image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
}

impl Predictions {
    pub fn push(&mut self, id: &str, pred: f64, gt: f64) {
        self.ids.push(id.to_owned());
        self.pred.push(pred);
        self.gt.push(gt);
    }

    pub fn report(&self) -> Result<MetricsReport> {
        MetricsReport::compute(&self.pred, &self.gt)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "pred_kcal", "gt_kcal"])?;
        for ((id, p), g) in self.ids.iter().zip(&self.pred).zip(&self.gt) {
            w.write_record([id.clone(), p.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Anything that maps an evaluation item to an energy.
pub trait EnergyPredictor<S> {
    fn predict(&self, item: &S) -> Result<f64>;
}

impl<S, F: Fn(&S) -> Result<f64>> EnergyPredictor<S> for F {
    fn predict(&self, item: &S) -> Result<f64> {
        self(item)
    }
}

pub fn evaluate<S>(items: &[(String, S, f64)], predictor: &dyn EnergyPredictor<S>) -> Result<Predictions> {
    let mut out = Predictions::default();
    for (id, item, gt) in items {
        out.push(id, predictor.predict(item)?, *gt);
    }
    Ok(out)
}

/// One row per (configuration, seed). `predictors(seed)` yields the models of
/// that seed, labelled by configuration.
pub fn run_ablation<S>(
    items: &[(String, S, f64)],
    seeds: &[u64],
    mut predictors: impl FnMut(u64) -> Result<Vec<(AblationConfig, Box<dyn EnergyPredictor<S>>)>>,
) -> Result<(Vec<AblationRow>, Vec<Predictions>)> {
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for &seed in seeds {
        for (config, predictor) in predictors(seed)? {
            let p = evaluate(items, predictor.as_ref())?;
            rows.push(AblationRow {
                config: config.label().to_owned(),
                seed,
                metrics: p.report()?,
            });
            preds.push(p);
        }
    }
    Ok((rows, preds))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of every metric, per configuration, in first-seen order.
pub fn median_table(rows: &[AblationRow]) -> Vec<(String, MetricsReport)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.config.as_str()) {
            labels.push(&r.config);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let of = |f: fn(&MetricsReport) -> f64| {
                median(rows.iter().filter(|r| r.config == label).map(|r| f(&r.metrics)).collect())
            };
            let n = rows.iter().find(|r| r.config == label).map_or(0, |r| r.metrics.n);
            let report = MetricsReport {
                n,
                mae_kcal: of(|m| m.mae_kcal),
                mape_pct: of(|m| m.mape_pct),
                maeom_pct: of(|m| m.maeom_pct),
                mean_gt_kcal: of(|m| m.mean_gt_kcal),
            };
            (label.to_owned(), report)
        })
        .collect()
}

pub fn format_table(table: &[(String, MetricsReport)]) -> String {
    let mut s = format!("{:<14}{:>6}{:>12}{:>10}{:>10}\n", "config", "n", "mae_kcal", "mape_%", "maeom_%");
    for (label, m) in table {
        let _ = writeln!(
            s,
            "{:<14}{:>6}{:>12.3}{:>10.3}{:>10.3}",
            label, m.n, m.mae_kcal, m.mape_pct, m.maeom_pct
        );
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    config: String,
    seed: u64,
    n: usize,
    mae_kcal: f64,
    mape_pct: f64,
    maeom_pct: f64,
    mean_gt_kcal: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        let m = &r.metrics;
        w.serialize(CsvRow {
            config: r.config.clone(),
            seed: r.seed,
            n: m.n,
            mae_kcal: m.mae_kcal,
            mape_pct: m.mape_pct,
            maeom_pct: m.maeom_pct,
            mean_gt_kcal: m.mean_gt_kcal,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(AblationRow {
                config: row.config,
                seed: row.seed,
                metrics: MetricsReport {
                    n: row.n,
                    mae_kcal: row.mae_kcal,
                    mape_pct: row.mape_pct,
                    maeom_pct: row.maeom_pct,
                    mean_gt_kcal: row.mean_gt_kcal,
                },
            })
        })
        .collect()
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Predicted vs groundtruth scatter with a y = x guide, one colour per series.
pub fn scatter_svg(series: &[(String, &Predictions)]) -> String {
    let (size, margin) = (480.0, 48.0);
    let hi = series
        .iter()
        .flat_map(|(_, p)| p.pred.iter().chain(&p.gt))
        .copied()
        .filter(|v| v.is_finite())
        .fold(1e-9_f64, f64::max)
        * 1.05;
    let map = |v: f64| margin + v.clamp(0.0, hi) / hi * (size - 2.0 * margin);
    let (x0, x1) = (map(0.0), map(hi));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let flip = |y: f64| size - y;
    let _ = writeln!(
        s,
        r##"<line class="guide" x1="{x0:.3}" y1="{:.3}" x2="{x1:.3}" y2="{:.3}" stroke="#888" stroke-dasharray="4 3"/>"##,
        flip(x0),
        flip(x1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">groundtruth energy (kCal)</text>"#,
        size / 2.0,
        size - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">predicted energy (kCal)</text>"#,
        size / 2.0,
        size / 2.0
    );
    let _ = writeln!(s, r#"<text x="{x1:.1}" y="{:.1}" font-size="10" text-anchor="end">{hi:.0}</text>"#, flip(x0) + 14.0);
    for (k, (label, p)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{label}" fill="{colour}" fill-opacity="0.7">"#);
        for (&pr, &gt) in p.pred.iter().zip(&p.gt) {
            let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="2.5"/>"#, map(gt), flip(map(pr)));
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{label}</text>"#,
            margin + 6.0,
            margin + 14.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv` and `scatter.svg` into `out_dir`.
pub fn emit_report(rows: &[AblationRow], series: &[(String, &Predictions)], out_dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(invalid("no metric rows to report"));
    }
    std::fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), rows)?;
    std::fs::write(out_dir.join("scatter.svg"), scatter_svg(series))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let (p, g) = ([110.0, 90.0], [100.0, 100.0]);
        assert_eq!(mae(&p, &g).unwrap(), 10.0);
        assert!((mape(&p, &g).unwrap() - 10.0).abs() < 1e-9);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn zero_groundtruth_is_excluded() {
        assert!((mape(&[5.0, 110.0], &[0.0, 100.0]).unwrap() - 10.0).abs() < 1e-12);
        assert!(mape(&[1.0], &[0.0]).is_err());
        assert!(maeom(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn labels_round_trip() {
        for c in AblationConfig::ALL {
            assert_eq!(AblationConfig::parse(c.label()).unwrap(), c);
        }
        assert!(AblationConfig::parse("bogus").is_err());
    }
}
