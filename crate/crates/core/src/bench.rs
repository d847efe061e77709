//! Scheme comparison reports: parameter/size/FLOP accounting, measured
//! time per training batch, and size/time-vs-accuracy trend lines.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::{normal, seeded_rng};
use crate::scheme::SchemeKind;
use crate::train::{TrainHyper, Trainer};
use crate::vit::{count_params, params_to_mib, vit_flops, ViTConfig};

/// Mean and sample standard deviation of timed training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsStats {
    pub batch_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl TpsStats {
    pub fn per_sample_ms(&self) -> f64 {
        self.mean_ms / self.batch_size as f64
    }
}

/// Times full training steps (forward, backward, AdamW) at f32 on random
/// inputs. The first `warmup_iters` steps are run but not recorded.
pub fn measure_tps(
    cfg: &ViTConfig,
    batch_size: usize,
    warmup_iters: usize,
    timed_iters: usize,
    seed: u64,
) -> Result<TpsStats> {
    if timed_iters < 5 {
        return Err(Error::Config(format!("timed_iters must be at least 5, got {timed_iters}")));
    }
    let hyper = TrainHyper { batch_size, seed, steps: warmup_iters + timed_iters, ..TrainHyper::default() };
    let mut trainer = Trainer::<f32>::new(cfg, &hyper)?;
    let images = normal::<f32, _>(cfg.image_shape(batch_size).to_vec(), 1.0, &mut seeded_rng(seed));
    let labels: Vec<usize> = (0..batch_size).map(|i| i % cfg.num_classes).collect();
    for _ in 0..warmup_iters {
        trainer.step(&images, &labels)?;
    }
    let mut samples_ms = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let started = Instant::now();
        trainer.step(&images, &labels)?;
        samples_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples_ms.len() as f64;
    let mean_ms = samples_ms.iter().sum::<f64>() / n;
    let var = samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(TpsStats { batch_size, mean_ms, std_ms: var.sqrt(), samples_ms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub scheme: String,
    pub params: usize,
    pub params_millions: f64,
    pub size_mib: f64,
    /// Forward matmul FLOPs for one batch of `flops_batch` images.
    pub flops_total: u64,
    pub tps: Option<TpsStats>,
    /// Percent change in parameters against the baseline record.
    pub delta_params_pct: f64,
    /// Percent change in per-batch time against the baseline record.
    pub tps_rel_delta_pct: Option<f64>,
    pub acc_top1: Option<f64>,
}

impl BenchRecord {
    pub fn tps_ms(&self) -> Option<f64> {
        self.tps.as_ref().map(|t| t.mean_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingOptions {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub flops_batch: usize,
    pub timing: Option<TimingOptions>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions { flops_batch: 1, timing: None }
    }
}

fn percent_change(value: f64, base: f64) -> f64 {
    (value - base) / base * 100.0
}

/// One record per config, MHA first, deltas against the MHA record (or the
/// first record when no MHA config is present).
pub fn compare_table(configs: &[ViTConfig], options: &CompareOptions) -> Result<Vec<BenchRecord>> {
    let first = configs.first().ok_or_else(|| Error::Config("no configs to compare".into()))?;
    for c in configs {
        let same = c.d == first.d
            && c.depth == first.depth
            && c.heads == first.heads
            && c.image_size == first.image_size
            && c.patch_size == first.patch_size
            && c.in_channels == first.in_channels
            && c.mlp_ratio == first.mlp_ratio
            && c.num_classes == first.num_classes;
        if !same {
            return Err(Error::Config(format!(
                "{} does not share base dims with {} (d, depth, heads, geometry, classes)",
                c.scheme.label(),
                first.scheme.label()
            )));
        }
    }
    let mut ordered: Vec<&ViTConfig> = configs.iter().filter(|c| is_mha(c)).collect();
    ordered.extend(configs.iter().filter(|c| !is_mha(c)));

    let mut records = Vec::with_capacity(ordered.len());
    for cfg in ordered {
        let params = count_params(cfg).total;
        let tps = match &options.timing {
            Some(t) => Some(measure_tps(cfg, t.batch_size, t.warmup_iters, t.timed_iters, t.seed)?),
            None => None,
        };
        records.push(BenchRecord {
            scheme: cfg.scheme.label().to_string(),
            params,
            params_millions: params as f64 / 1e6,
            size_mib: params_to_mib(params),
            flops_total: vit_flops(cfg, options.flops_batch)?,
            tps,
            delta_params_pct: 0.0,
            tps_rel_delta_pct: None,
            acc_top1: None,
        });
    }
    let baseline = records[0].scheme.clone();
    rebaseline(&mut records, &baseline)?;
    Ok(records)
}

fn is_mha(c: &ViTConfig) -> bool {
    c.scheme.spec().map(|s| s.kind()) == Some(SchemeKind::Mha)
}

/// Recomputes every delta against the record labelled `baseline`.
pub fn rebaseline(records: &mut [BenchRecord], baseline: &str) -> Result<()> {
    let base = records
        .iter()
        .find(|r| r.scheme == baseline)
        .ok_or_else(|| Error::Config(format!("baseline {baseline} not in report")))?;
    let (base_params, base_tps) = (base.params as f64, base.tps_ms());
    for r in records.iter_mut() {
        r.delta_params_pct = percent_change(r.params as f64, base_params);
        r.tps_rel_delta_pct = match (r.tps_ms(), base_tps) {
            (Some(t), Some(b)) => Some(percent_change(t, b)),
            _ => None,
        };
    }
    Ok(())
}

/// One output row; CSV columns and JSON keys share these names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: String,
    pub params_m: f64,
    pub size_mib: f64,
    pub flops: u64,
    pub tps_batch_ms: Option<f64>,
    pub tps_sample_ms: Option<f64>,
    pub delta_params_pct: f64,
    pub acc_top1: Option<f64>,
}

pub const CSV_HEADER: &str = "scheme,params_m,size_mib,flops,tps_batch_ms,tps_sample_ms,delta_params_pct,acc_top1";

impl From<&BenchRecord> for ReportRow {
    fn from(r: &BenchRecord) -> Self {
        ReportRow {
            scheme: r.scheme.clone(),
            params_m: r.params_millions,
            size_mib: r.size_mib,
            flops: r.flops_total,
            tps_batch_ms: r.tps_ms(),
            tps_sample_ms: r.tps.as_ref().map(TpsStats::per_sample_ms),
            delta_params_pct: r.delta_params_pct,
            acc_top1: r.acc_top1,
        }
    }
}

pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(ReportRow::from(r))?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(records: &[BenchRecord], mut out: W) -> Result<()> {
    let rows: Vec<ReportRow> = records.iter().map(ReportRow::from).collect();
    serde_json::to_writer_pretty(&mut out, &rows)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Fixed-width table with values rounded for display.
pub fn render_table(records: &[BenchRecord]) -> String {
    let mut s = format!(
        "{:<12} {:>10} {:>10} {:>12} {:>9} {:>14} {:>10}\n",
        "scheme", "params(M)", "size(MiB)", "delta(%)", "acc", "tps(ms/batch)", "GFLOPs"
    );
    for r in records {
        let acc = r.acc_top1.map(|a| format!("{:.2}", a * 100.0)).unwrap_or_else(|| "-".into());
        let tps = r.tps.as_ref().map(|t| format!("{:.2}±{:.2}", t.mean_ms, t.std_ms)).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<12} {:>10.2} {:>10.2} {:>12.2} {:>9} {:>14} {:>10.3}\n",
            r.scheme,
            r.params_millions,
            r.size_mib,
            r.delta_params_pct,
            acc,
            tps,
            r.flops_total as f64 / 1e9
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares; `r2` is 1 when `y` is constant.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!("a trend line needs 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    /// `(x, y)` sorted by `x`.
    pub points: Vec<(f64, f64)>,
    pub fit: LinearFit,
}

impl Series {
    fn from_points(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let fit = fit_line(&points)?;
        Ok(Series { points, fit })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y"])?;
        for (x, y) in &self.points {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_fit_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.fit)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterData {
    pub size_vs_acc: Series,
    /// Present when every record carries a timing.
    pub tps_vs_acc: Option<Series>,
}

pub fn scatter_data(records: &[BenchRecord]) -> Result<ScatterData> {
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!("scatter needs 2 records, got {}", records.len())));
    }
    let mut size = Vec::with_capacity(records.len());
    for r in records {
        let acc = r.acc_top1.ok_or_else(|| Error::InsufficientData(format!("{} has no accuracy", r.scheme)))?;
        size.push((r.size_mib, acc));
    }
    let tps: Option<Vec<(f64, f64)>> = records.iter().map(|r| Some((r.tps_ms()?, r.acc_top1?))).collect();
    Ok(ScatterData { size_vs_acc: Series::from_points(size)?, tps_vs_acc: tps.map(Series::from_points).transpose()? })
}

/// A published comparison row: label, time per batch (ms), top-1 accuracy
/// (%), parameters (M), parameter change (%), size (MiB).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub scheme: &'static str,
    pub tps_ms: f64,
    pub acc_top1: f64,
    pub params_m: f64,
    pub delta_params_pct: f64,
    pub size_mib: f64,
}

/// Reference ViT-small results, one row per scheme in published order.
pub const REFERENCE_TABLE: [ReferenceRow; 9] = [
    ReferenceRow {
        scheme: "MHA",
        tps_ms: 178.90,
        acc_top1: 71.56,
        params_m: 22.05,
        delta_params_pct: 0.0,
        size_mib: 84.11,
    },
    ReferenceRow {
        scheme: "GKVA-3",
        tps_ms: 177.96,
        acc_top1: 71.84,
        params_m: 21.16,
        delta_params_pct: -4.04,
        size_mib: 80.73,
    },
    ReferenceRow {
        scheme: "GKVA-2",
        tps_ms: 177.88,
        acc_top1: 71.73,
        params_m: 20.86,
        delta_params_pct: -5.40,
        size_mib: 79.60,
    },
    ReferenceRow {
        scheme: "MKVA",
        tps_ms: 177.58,
        acc_top1: 71.52,
        params_m: 20.57,
        delta_params_pct: -6.71,
        size_mib: 78.47,
    },
    ReferenceRow {
        scheme: "GQA-3",
        tps_ms: 177.84,
        acc_top1: 71.44,
        params_m: 20.27,
        delta_params_pct: -8.07,
        size_mib: 77.34,
    },
    ReferenceRow {
        scheme: "GQA-2",
        tps_ms: 176.89,
        acc_top1: 71.24,
        params_m: 19.68,
        delta_params_pct: -10.75,
        size_mib: 75.09,
    },
    ReferenceRow {
        scheme: "MQA",
        tps_ms: 173.94,
        acc_top1: 70.23,
        params_m: 19.09,
        delta_params_pct: -13.42,
        size_mib: 72.83,
    },
    ReferenceRow {
        scheme: "GQKVA-2.3",
        tps_ms: 175.77,
        acc_top1: 70.69,
        params_m: 19.09,
        delta_params_pct: -13.42,
        size_mib: 72.83,
    },
    ReferenceRow {
        scheme: "GQKVA-3.2",
        tps_ms: 175.67,
        acc_top1: 70.59,
        params_m: 18.79,
        delta_params_pct: -14.78,
        size_mib: 71.70,
    },
];

/// The reference rows as records, for feeding [`scatter_data`].
pub fn reference_records() -> Vec<BenchRecord> {
    REFERENCE_TABLE
        .iter()
        .map(|r| BenchRecord {
            scheme: r.scheme.to_string(),
            params: (r.params_m * 1e6).round() as usize,
            params_millions: r.params_m,
            size_mib: r.size_mib,
            flops_total: 0,
            tps: Some(TpsStats { batch_size: 1, mean_ms: r.tps_ms, std_ms: 0.0, samples_ms: vec![r.tps_ms] }),
            delta_params_pct: r.delta_params_pct,
            tps_rel_delta_pct: None,
            acc_top1: Some(r.acc_top1),
        })
        .collect()
}
