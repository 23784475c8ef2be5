//! One pipeline per parameter value over a shared stage store, plus
//! per-metric curves.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use ffkv_core::metrics::METRIC_KEYS;
use serde::{Deserialize, Serialize};

use crate::config::WorkbenchConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{run_pipeline, RunSummary, SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// TopK budget of the TopK FF-KV coders.
    K,
    /// FF hidden width; every value trains its own model.
    DFf,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::DFf => "d_ff",
        }
    }

    pub fn apply(self, cfg: &mut WorkbenchConfig, value: usize) {
        match self {
            SweepParam::K => cfg.topk.k = value,
            SweepParam::DFf => cfg.model.d_ff = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepParam::K),
            "d_ff" | "d_FF" | "dff" => Ok(SweepParam::DFf),
            other => Err(CliError::Usage(format!("unknown sweep parameter {other:?}; use k or d_ff"))),
        }
    }
}

pub fn parse_values(csv: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("sweep value {s:?} is not a count"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: usize,
    pub coder: String,
    pub layer: usize,
    pub metric: String,
    pub mean: Option<f64>,
    pub pm_2sem: Option<f64>,
    pub n_sub_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub runs: Vec<PathBuf>,
    pub curves: Vec<CurvePoint>,
}

impl SweepReport {
    pub fn curve(&self, coder: &str, layer: usize, metric: &str) -> Vec<(usize, Option<f64>)> {
        self.curves
            .iter()
            .filter(|c| c.coder == coder && c.layer == layer && c.metric == metric)
            .map(|c| (c.value, c.mean))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},coder,layer,metric,mean,pm_2sem,n_sub_runs\n", self.param.as_str());
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.curves {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.value,
                c.coder,
                c.layer,
                c.metric,
                f(c.mean),
                f(c.pm_2sem),
                c.n_sub_runs
            );
        }
        out
    }
}

/// Point directories live under `cfg.output_dir`; all points share one
/// store so unchanged stages are built once.
pub fn run_sweep(cfg: &WorkbenchConfig, param: SweepParam, values: &[usize]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let store = cfg.store_dir();
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for &v in values {
        let mut point = cfg.clone();
        param.apply(&mut point, v);
        point.output_dir = cfg.output_dir.join(format!("{}-{v}", param.as_str()));
        point.store_dir = Some(store.clone());
        log::info!("sweep {}={v}", param.as_str());
        let summary: RunSummary = run_pipeline(&point)?;
        for r in &summary.reports {
            for m in METRIC_KEYS {
                let mv = r.metrics.get(m);
                curves.push(CurvePoint {
                    value: v,
                    coder: r.label.clone(),
                    layer: r.coder.layer,
                    metric: m.to_string(),
                    mean: mv.and_then(|x| x.value),
                    pm_2sem: mv.and_then(|x| x.dispersion),
                    n_sub_runs: mv.map_or(0, |x| x.sub_runs.len()),
                });
            }
        }
        runs.push(point.output_dir);
    }
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        param,
        values: values.to_vec(),
        runs,
        curves,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("sweep.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(cfg.output_dir.join("sweep.csv"), report.to_csv())?;
    Ok(report)
}
