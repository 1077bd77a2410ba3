//! Per-replicate records, per-method summaries and their CSV/JSON forms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};

/// JSON has no infinity; lengths of unbounded sets are written as `"inf"`.
mod real {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            Some(x) => s.serialize_str(&super::format_real(*x)),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) => super::parse_real(&t)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }
}

pub fn format_real(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

fn parse_real(t: &str) -> Option<f64> {
    match t {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        other => other.parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub method: Method,
    pub replication: usize,
    #[serde(with = "real")]
    pub coverage: Option<f64>,
    #[serde(with = "real")]
    pub avg_length: Option<f64>,
    /// Calibration points entering the quantile (matched count for the
    /// subsampling-based methods; mean over splits for multi-split).
    #[serde(with = "real")]
    pub n_matched_cal: Option<f64>,
    /// Kish effective sample size of the calibration weights.
    #[serde(with = "real", default)]
    pub effective_sample_size: Option<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn failure(method: Method, replication: usize, error: String) -> Self {
        Self {
            method,
            replication,
            coverage: None,
            avg_length: None,
            n_matched_cal: None,
            effective_sample_size: None,
            failed: true,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    #[serde(with = "real")]
    pub mean_coverage: Option<f64>,
    #[serde(with = "real")]
    pub sd_coverage: Option<f64>,
    #[serde(with = "real")]
    pub mean_length: Option<f64>,
    #[serde(with = "real")]
    pub sd_length: Option<f64>,
    #[serde(with = "real")]
    pub mean_matched_cal: Option<f64>,
    #[serde(with = "real", default)]
    pub mean_effective_sample_size: Option<f64>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean.is_infinite() {
        return (Some(mean), None);
    }
    let sd = if values.len() > 1 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        Some(0.0)
    };
    (Some(mean), sd)
}

impl MethodSummary {
    pub fn from_records(method: Method, records: &[ReplicateRecord]) -> Self {
        let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method && !r.failed).collect();
        let failures = records.iter().filter(|r| r.method == method && r.failed).count();
        let pick = |f: fn(&ReplicateRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        let (mean_coverage, sd_coverage) = mean_sd(&pick(|r| r.coverage));
        let (mean_length, sd_length) = mean_sd(&pick(|r| r.avg_length));
        let (mean_matched_cal, _) = mean_sd(&pick(|r| r.n_matched_cal));
        let (mean_effective_sample_size, _) = mean_sd(&pick(|r| r.effective_sample_size));
        Self {
            method,
            successes: ok.len(),
            failures,
            mean_coverage,
            sd_coverage,
            mean_length,
            sd_length,
            mean_matched_cal,
            mean_effective_sample_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Bandwidth multipliers chosen on the tuning replicate, by method.
    pub kernel_scales: BTreeMap<Method, f64>,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, kernel_scales: BTreeMap<Method, f64>, records: Vec<ReplicateRecord>) -> Self {
        let summaries = config
            .methods
            .iter()
            .map(|&m| MethodSummary::from_records(m, &records))
            .collect();
        Self {
            config,
            kernel_scales,
            summaries,
            records,
        }
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn total_failures(&self) -> usize {
        self.summaries.iter().map(|s| s.failures).sum()
    }

    /// Coverage values of the successful replicates of `method`, in order.
    pub fn coverages(&self, method: Method) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.coverage)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "replication", "coverage", "avg_length", "n_matched_cal", "failed"])?;
        let opt = |v: Option<f64>| v.map(format_real).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.method.name().to_string(),
                r.replication.to_string(),
                opt(r.coverage),
                opt(r.avg_length),
                opt(r.n_matched_cal),
                r.failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv_file = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(csv_file))
            .map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }

    /// One line per method for terminal output.
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| if x.is_finite() { format!("{x:.4}") } else { format_real(x) }).unwrap_or("-".into());
        let mut out = format!(
            "{:<12} {:>9} {:>8} {:>10} {:>9} {:>8}\n",
            "method", "coverage", "sd", "length", "matched", "failed"
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{:<12} {:>9} {:>8} {:>10} {:>9} {:>8}\n",
                s.method.name(),
                fmt(s.mean_coverage),
                fmt(s.sd_coverage),
                fmt(s.mean_length),
                s.mean_matched_cal.map(|v| format!("{v:.1}")).unwrap_or("-".into()),
                s.failures
            ));
        }
        out
    }
}
