//! Run directories: `log.csv`, `weights.csv` and `metadata.json`, plus the
//! analysis outputs `report.json` and `metrics.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::analysis::MetricReport;
use crate::sim::{log_columns, Divergence, RunLog, StateLayout, WeightCheckpoint, LOG_SCHEMA_VERSION};
use crate::{Error, Result};

pub const LOG_FILE: &str = "log.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const WEIGHT_COLUMNS: [&str; 6] = ["label", "t", "agent", "channel", "neuron", "weight"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub label: String,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub t: f64,
    pub component: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutInfo {
    pub dim: usize,
    pub n_agents: usize,
    pub n_neurons: usize,
}

/// Sidecar describing a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub code_version: String,
    pub layout: LayoutInfo,
    pub rows: usize,
    pub checkpoints: Vec<CheckpointInfo>,
    /// 0-based neuron indices that ever entered a regressor.
    pub active_neurons: Vec<usize>,
    pub divergence: Option<DivergenceInfo>,
    pub config: ScenarioConfig,
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// Writes the three run files into `dir`, creating it if needed.
pub fn write_run(dir: &Path, config: &ScenarioConfig, log: &RunLog) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let path = dir.join(LOG_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(&log.columns)?;
    let mut rec = Vec::with_capacity(log.columns.len());
    for r in 0..log.n_rows() {
        rec.clear();
        rec.extend(log.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join(WEIGHTS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(WEIGHT_COLUMNS)?;
    let l = &log.layout;
    for c in &log.checkpoints {
        for (idx, &v) in c.weights.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let neuron = idx % l.n_neurons;
            let channel = (idx / l.n_neurons) % l.dim;
            let agent = idx / (l.n_neurons * l.dim);
            w.write_record([
                c.label.clone(),
                c.t.to_string(),
                (agent + 1).to_string(),
                (channel + 1).to_string(),
                neuron.to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let meta = RunMetadata {
        schema_version: LOG_SCHEMA_VERSION,
        code_version: code_version(),
        layout: LayoutInfo {
            dim: l.dim,
            n_agents: l.n_agents,
            n_neurons: l.n_neurons,
        },
        rows: log.n_rows(),
        checkpoints: log
            .checkpoints
            .iter()
            .map(|c| CheckpointInfo {
                label: c.label.clone(),
                t: c.t,
            })
            .collect(),
        active_neurons: log.active_neurons.clone(),
        divergence: log.divergence.as_ref().map(|d| DivergenceInfo {
            t: d.t,
            component: d.component.clone(),
        }),
        config: config.clone(),
    };
    write_json(&dir.join(METADATA_FILE), &meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

pub fn read_metadata(dir: &Path) -> Result<RunMetadata> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: RunMetadata = serde_json::from_str(&text)?;
    if meta.schema_version != LOG_SCHEMA_VERSION {
        return Err(Error::Log(format!(
            "{}: schema version {} is not the supported {}",
            path.display(),
            meta.schema_version,
            LOG_SCHEMA_VERSION
        )));
    }
    Ok(meta)
}

/// Reads a run directory back into a [`RunLog`] and its metadata.
pub fn read_run(dir: &Path) -> Result<(RunMetadata, RunLog)> {
    let meta = read_metadata(dir)?;
    let layout = StateLayout {
        dim: meta.layout.dim,
        n_agents: meta.layout.n_agents,
        n_neurons: meta.layout.n_neurons,
    };

    let path = dir.join(LOG_FILE);
    let mut rd = csv::Reader::from_reader(File::open(&path).map_err(|e| io_err(&path, e))?);
    let columns: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if columns != log_columns(&layout) {
        return Err(Error::Log(format!(
            "{}: header does not match the recorded layout",
            path.display()
        )));
    }
    let mut data = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            data.push(field.parse::<f64>().map_err(|_| {
                Error::Log(format!(
                    "{}: row {}, column {}: `{field}` is not a number",
                    path.display(),
                    r + 1,
                    columns[c]
                ))
            })?);
        }
    }

    let path = dir.join(WEIGHTS_FILE);
    let mut rd = csv::Reader::from_reader(File::open(&path).map_err(|e| io_err(&path, e))?);
    if rd.headers()?.iter().ne(WEIGHT_COLUMNS) {
        return Err(Error::Log(format!("{}: unexpected header", path.display())));
    }
    let len = layout.n_agents * layout.dim * layout.n_neurons;
    let mut checkpoints: Vec<WeightCheckpoint> = meta
        .checkpoints
        .iter()
        .map(|c| WeightCheckpoint {
            label: c.label.clone(),
            t: c.t,
            weights: vec![0.0; len],
        })
        .collect();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Log(format!("{}: row {}: {what}", path.display(), r + 1));
        if rec.len() != WEIGHT_COLUMNS.len() {
            return Err(bad("wrong field count"));
        }
        let cp = checkpoints
            .iter_mut()
            .find(|c| c.label == rec[0])
            .ok_or_else(|| bad("unknown checkpoint label"))?;
        let agent: usize = rec[2].parse().map_err(|_| bad("bad agent"))?;
        let channel: usize = rec[3].parse().map_err(|_| bad("bad channel"))?;
        let neuron: usize = rec[4].parse().map_err(|_| bad("bad neuron"))?;
        let weight: f64 = rec[5].parse().map_err(|_| bad("bad weight"))?;
        if agent == 0 || agent > layout.n_agents || channel == 0 || channel > layout.dim || neuron >= layout.n_neurons {
            return Err(bad("index out of range"));
        }
        cp.weights[((agent - 1) * layout.dim + channel - 1) * layout.n_neurons + neuron] = weight;
    }

    let log = RunLog {
        layout,
        columns,
        data,
        checkpoints,
        active_neurons: meta.active_neurons.clone(),
        divergence: meta.divergence.as_ref().map(|d| Divergence {
            t: d.t,
            component: d.component.clone(),
        }),
    };
    log.check_schema()?;
    if log.n_rows() != meta.rows {
        return Err(Error::Log(format!(
            "{}: {} rows but metadata records {}",
            dir.join(LOG_FILE).display(),
            log.n_rows(),
            meta.rows
        )));
    }
    Ok((meta, log))
}

/// `report.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub code_version: String,
    pub run_dir: PathBuf,
    /// Windows that held no samples; set when the log was too short to analyze.
    pub empty_windows: Option<String>,
    pub report: Option<MetricReport>,
}

/// Flat `section,agent,channel,metric,value` table of the headline metrics.
pub fn write_metrics_csv(path: &Path, r: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["section", "agent", "channel", "metric", "value"])?;
    let mut put = |section: &str, agent: Option<usize>, channel: Option<usize>, metric: &str, value: Option<f64>| {
        let s = |o: Option<usize>| o.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            section.to_string(),
            s(agent),
            s(channel),
            metric.to_string(),
            value.map(|v| v.to_string()).unwrap_or_default(),
        ])
    };
    put("estimator", None, None, "threshold", Some(r.estimator.threshold))?;
    put("estimator", None, None, "settle_time", r.estimator.settle_time)?;
    put("estimator", None, None, "final_error", Some(r.estimator.final_error))?;
    for (i, a) in r.tracking.agents.iter().enumerate() {
        put("tracking", Some(i + 1), None, "steady_mean", Some(a.steady_mean))?;
        put("tracking", Some(i + 1), None, "steady_max", Some(a.steady_max))?;
        put("tracking", Some(i + 1), None, "decay_rate", a.decay_rate)?;
    }
    put(
        "formation",
        None,
        None,
        "max_pair_error",
        Some(r.formation.max_pair_error),
    )?;
    put(
        "formation",
        None,
        None,
        "mean_pair_error",
        Some(r.formation.mean_pair_error),
    )?;
    for (k, (&f, &b)) in r
        .consensus
        .final_ratio
        .iter()
        .zip(&r.consensus.worst_rebound)
        .enumerate()
    {
        put("consensus", None, Some(k + 1), "final_ratio", Some(f))?;
        put("consensus", None, Some(k + 1), "worst_rebound", Some(b))?;
    }
    for (k, &q) in r.consensus.worst_rise.iter().enumerate() {
        put("consensus", None, Some(k + 1), "worst_rise", Some(q))?;
    }
    if let Some(a) = &r.approximation {
        for c in &a.channels {
            let (ag, ch) = (Some(c.agent + 1), Some(c.channel + 1));
            put("approximation", ag, ch, "rms_true", Some(c.rms_true))?;
            put("approximation", ag, ch, "rms_error_mean", Some(c.rms_error_mean))?;
            put("approximation", ag, ch, "relative_mean", c.relative_mean)?;
            put("approximation", ag, ch, "relative_instant", c.relative_instant)?;
        }
    }
    put(
        "far_neurons",
        None,
        None,
        "worst_ratio",
        r.far_neurons.applicable.then_some(r.far_neurons.worst_ratio),
    )?;
    for s in &r.excitation {
        put("excitation", Some(s.agent + 1), None, "min_eta", Some(s.min_eta))?;
        put(
            "excitation",
            Some(s.agent + 1),
            None,
            "worst_eta_normalized",
            s.worst.as_ref().map(|w| w.eta_normalized),
        )?;
    }
    put("boundedness", None, None, "sup_z1", Some(r.boundedness.sup_z1))?;
    put("boundedness", None, None, "sup_z2", Some(r.boundedness.sup_z2))?;
    put("boundedness", None, None, "sup_w_inf", Some(r.boundedness.sup_w_inf))?;
    for v in &r.verdicts {
        put(
            "verdict",
            None,
            None,
            &format!("criterion_{}", v.id),
            Some(if v.pass { 1.0 } else { 0.0 }),
        )?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
