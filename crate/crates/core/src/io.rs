//! File artifacts: trajectory CSV and binary dumps, lambda schedules, reports and metric tables.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every file is a
//! deterministic function of its inputs and parses back to the same bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::analysis::MetricReport;
use crate::distill::{AblationRow, ReportRow};
use crate::dode::LambdaSchedule;
use crate::error::{DodeError, Result};
use crate::solvers::Trajectory;

const TRAJECTORY_MAGIC: &[u8; 8] = b"DODETRJ1";

impl From<csv::Error> for DodeError {
    fn from(e: csv::Error) -> Self {
        DodeError::Format(e.to_string())
    }
}

/// Sample states (and optionally denoising outputs) at a sequence of times.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryData {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
    /// One per step, `times.len() - 1` entries, or empty when not recorded.
    pub outputs: Vec<Array2<f64>>,
}

impl TrajectoryData {
    pub fn from_trajectory(tr: &Trajectory) -> Result<Self> {
        if !tr.is_recorded() {
            return Err(DodeError::Config("trajectory was not recorded".into()));
        }
        Ok(Self {
            times: tr.times.clone(),
            states: tr.states.clone(),
            outputs: tr.outputs.iter().map(|o| o.value.clone()).collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.states.len() != self.times.len() {
            return Err(DodeError::Format(format!(
                "{} times but {} states",
                self.times.len(),
                self.states.len()
            )));
        }
        if !self.outputs.is_empty() && self.outputs.len() + 1 != self.times.len() {
            return Err(DodeError::Format(format!(
                "{} outputs for {} steps",
                self.outputs.len(),
                self.times.len() - 1
            )));
        }
        let shape = self.states[0].dim();
        if self.states.iter().chain(&self.outputs).any(|s| s.dim() != shape) {
            return Err(DodeError::Format("inconsistent batch shapes".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.states[0].dim()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// One row per `(step, sample, coordinate)`; `output` is empty on the final row.
pub fn write_trajectory_csv<W: Write>(out: W, data: &TrajectoryData) -> Result<()> {
    data.validate()?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "time", "sample", "coord", "state", "output"])?;
    let (rows, cols) = data.dim();
    for (step, (t, s)) in data.times.iter().zip(&data.states).enumerate() {
        let out = data.outputs.get(step);
        for i in 0..rows {
            for j in 0..cols {
                w.write_record([
                    step.to_string(),
                    fmt(*t),
                    i.to_string(),
                    j.to_string(),
                    fmt(s[[i, j]]),
                    out.map(|o| fmt(o[[i, j]])).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory_csv(path: &Path, data: &TrajectoryData) -> Result<()> {
    write_trajectory_csv(create(path)?, data)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| DodeError::Format(format!("bad {what} value '{s}'")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| DodeError::Format(format!("bad {what} index '{s}'")))
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<TrajectoryData> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != ["step", "time", "sample", "coord", "state", "output"] {
        return Err(DodeError::Format(format!("unexpected trajectory header {header:?}")));
    }
    let mut records = Vec::new();
    let (mut steps, mut rows, mut cols) = (0, 0, 0);
    for rec in r.records() {
        let rec = rec?;
        let step = parse_usize(&rec[0], "step")?;
        let i = parse_usize(&rec[2], "sample")?;
        let j = parse_usize(&rec[3], "coord")?;
        let out = if rec[5].is_empty() { None } else { Some(parse_f64(&rec[5], "output")?) };
        records.push((step, parse_f64(&rec[1], "time")?, i, j, parse_f64(&rec[4], "state")?, out));
        steps = steps.max(step + 1);
        rows = rows.max(i + 1);
        cols = cols.max(j + 1);
    }
    if records.len() != steps * rows * cols || records.is_empty() {
        return Err(DodeError::Format("trajectory csv is empty or incomplete".into()));
    }
    let mut times = vec![f64::NAN; steps];
    let mut states = vec![Array2::from_elem((rows, cols), f64::NAN); steps];
    let has_outputs = records.iter().any(|r| r.5.is_some());
    let mut outputs = if has_outputs {
        vec![Array2::from_elem((rows, cols), f64::NAN); steps - 1]
    } else {
        Vec::new()
    };
    for (step, t, i, j, s, o) in records {
        times[step] = t;
        states[step][[i, j]] = s;
        if let Some(o) = o {
            let slot = outputs
                .get_mut(step)
                .ok_or_else(|| DodeError::Format("output on the final step".into()))?;
            slot[[i, j]] = o;
        }
    }
    if states.iter().chain(&outputs).any(|s| s.iter().any(|v| v.is_nan())) || times.iter().any(|t| t.is_nan()) {
        return Err(DodeError::Format("trajectory csv has missing entries".into()));
    }
    let data = TrajectoryData { times, states, outputs };
    data.validate()?;
    Ok(data)
}

pub fn load_trajectory_csv(path: &Path) -> Result<TrajectoryData> {
    read_trajectory_csv(open(path)?)
}

/// Compact little-endian dump: magic, `(n_times, rows, cols, has_outputs)` as `u64`, then
/// times, states and outputs as `f64`.
pub fn write_trajectory_bin<W: Write>(mut out: W, data: &TrajectoryData) -> Result<()> {
    data.validate()?;
    let (rows, cols) = data.dim();
    out.write_all(TRAJECTORY_MAGIC)?;
    for v in [data.times.len(), rows, cols, usize::from(!data.outputs.is_empty())] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    let values = data
        .times
        .iter()
        .chain(data.states.iter().flat_map(|s| s.iter()))
        .chain(data.outputs.iter().flat_map(|s| s.iter()));
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trajectory_bin(path: &Path, data: &TrajectoryData) -> Result<()> {
    write_trajectory_bin(create(path)?, data)
}

pub fn read_trajectory_bin<R: Read>(mut input: R) -> Result<TrajectoryData> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(DodeError::Format("not a trajectory dump".into()));
    }
    let mut word = [0u8; 8];
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = usize::try_from(u64::from_le_bytes(word)).map_err(|_| DodeError::Format("header overflow".into()))?;
    }
    let [n, rows, cols, has_outputs] = header;
    if n == 0 || has_outputs > 1 {
        return Err(DodeError::Format("bad trajectory header".into()));
    }
    let mut next = || -> Result<f64> {
        input.read_exact(&mut word)?;
        Ok(f64::from_le_bytes(word))
    };
    let times = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let mut block = || -> Result<Array2<f64>> {
        let v = (0..rows * cols).map(|_| next()).collect::<Result<Vec<_>>>()?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| DodeError::Format(e.to_string()))
    };
    let states = (0..n).map(|_| block()).collect::<Result<Vec<_>>>()?;
    let n_out = if has_outputs == 1 { n - 1 } else { 0 };
    let outputs = (0..n_out).map(|_| block()).collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryData { times, states, outputs })
}

pub fn load_trajectory_bin(path: &Path) -> Result<TrajectoryData> {
    read_trajectory_bin(open(path)?)
}

/// Reads either format, by magic number.
pub fn load_trajectory(path: &Path) -> Result<TrajectoryData> {
    let mut head = [0u8; 8];
    let is_bin = File::open(path)?.read_exact(&mut head).is_ok() && &head == TRAJECTORY_MAGIC;
    if is_bin {
        load_trajectory_bin(path)
    } else {
        load_trajectory_csv(path)
    }
}

pub fn lambda_schedule_to_json(s: &LambdaSchedule) -> Result<String> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    Ok(text)
}

pub fn lambda_schedule_from_json(text: &str) -> Result<LambdaSchedule> {
    Ok(serde_json::from_str(text)?)
}

pub fn save_lambda_schedule(path: &Path, s: &LambdaSchedule) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(lambda_schedule_to_json(s)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_lambda_schedule(path: &Path) -> Result<LambdaSchedule> {
    lambda_schedule_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_report_csv<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "stage", "time", "lambda", "obj0", "obj_star"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.stage.to_string(),
            fmt(r.time),
            fmt(r.lambda),
            fmt(r.obj0),
            fmt(r.obj_star),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_report_csv(create(path)?, rows)
}

pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(DodeError::Format("report rows have 6 fields".into()));
            }
            Ok(ReportRow {
                step: parse_usize(&rec[0], "step")?,
                stage: parse_usize(&rec[1], "stage")?,
                time: parse_f64(&rec[2], "time")?,
                lambda: parse_f64(&rec[3], "lambda")?,
                obj0: parse_f64(&rec[4], "obj0")?,
                obj_star: parse_f64(&rec[5], "obj_star")?,
            })
        })
        .collect()
}

/// `name,value,metadata` with metadata as `key=value` pairs joined by `;`.
pub fn write_metrics_csv<W: Write>(out: W, metrics: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "value", "metadata"])?;
    for m in metrics {
        let meta: Vec<String> = m.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        w.write_record([m.name.clone(), fmt(m.value), meta.join(";")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(path: &Path, metrics: &[MetricReport]) -> Result<()> {
    write_metrics_csv(create(path)?, metrics)
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let seeds = rows.iter().map(|r| r.per_seed.len()).max().unwrap_or(0);
    let mut header = vec!["axis".to_string(), "value".into(), "mean".into(), "std".into()];
    header.extend((0..seeds).map(|k| format!("seed{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.name().to_string(), r.value.to_string(), fmt(r.mean), fmt(r.std)];
        rec.extend(r.per_seed.iter().map(|v| fmt(*v)));
        rec.resize(header.len(), String::new());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_ablation_csv(create(path)?, rows)
}

/// Plain numeric matrix, no header.
pub fn write_matrix_csv<W: Write>(out: W, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.rows() {
        w.write_record(row.iter().map(|v| fmt(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_matrix_csv(create(path)?, m)
}

/// Numeric matrix with an optional header row (detected by a non-numeric first field).
pub fn read_matrix_csv<R: Read>(input: R) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut data = Vec::new();
    let mut cols = None;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if k == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => return Err(DodeError::Format(format!("row {k} has {} fields, expected {c}", rec.len()))),
            _ => {}
        }
        for f in rec.iter() {
            data.push(parse_f64(f, "matrix")?);
        }
    }
    let cols = cols.ok_or_else(|| DodeError::Empty("matrix csv has no rows".into()))?;
    Array2::from_shape_vec((data.len() / cols, cols), data).map_err(|e| DodeError::Format(e.to_string()))
}

pub fn load_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    read_matrix_csv(open(path)?)
}

/// A batch with a `sample,x0,x1,...` header.
pub fn write_batch_csv<W: Write>(out: W, batch: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string()];
    header.extend((0..batch.ncols()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, row) in batch.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_batch_csv(path: &Path, batch: &Array2<f64>) -> Result<()> {
    write_batch_csv(create(path)?, batch)
}

/// Named columns of equal length.
pub fn write_series_csv<W: Write>(out: W, columns: &[(&str, Vec<f64>)]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(DodeError::ShapeMismatch {
            expected: vec![n],
            got: columns.iter().map(|c| c.1.len()).collect(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns.iter().map(|c| c.0))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| fmt(c.1[i])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_series_csv(path: &Path, columns: &[(&str, Vec<f64>)]) -> Result<()> {
    write_series_csv(create(path)?, columns)
}
