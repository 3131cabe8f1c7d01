use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusSplit, Provenance};
use crate::context::{ContextSpec, ContextWindow, StateKind, StateValue};
use crate::error::{CatpError, Result};
use crate::sample::{DataSample, Trajectory, WindowShape};
use crate::scalar::Scalar;

/// A set of time-ordered CSV files, one row per timestep.
///
/// Each unit contributes the columns `<unit>_x` and `<unit>_y`; each schema
/// state is read from the column of the same name. Other columns are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub paths: Vec<PathBuf>,
    pub schema: PathBuf,
    pub units: Vec<String>,
    #[serde(default)]
    pub target_unit: usize,
    pub stride: usize,
    pub lc: usize,
    pub lx: usize,
    pub ly: usize,
    #[serde(default = "one")]
    pub dt: f64,
    #[serde(default = "one")]
    pub max_step: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows dropped for a missing value; each one also breaks the series.
    pub rows_skipped: usize,
    pub samples: usize,
}

/// Column order used by [`encode_row`] and expected by [`decode_row`].
#[derive(Clone, Debug, PartialEq)]
pub struct CsvLayout {
    pub schema: ContextSpec,
    pub units: Vec<String>,
}

/// One decoded timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub points: Vec<[f64; 2]>,
    pub states: Vec<StateValue>,
}

impl CsvLayout {
    pub fn header(&self) -> Vec<String> {
        self.units
            .iter()
            .flat_map(|u| [format!("{u}_x"), format!("{u}_y")])
            .chain(self.schema.states.iter().map(|s| s.name.clone()))
            .collect()
    }

    /// Positions of the layout's columns in a file header.
    fn resolve(&self, header: &csv::StringRecord, path: &Path) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        self.header()
            .iter()
            .map(|name| {
                index
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| CatpError::data(format!("{}: missing column '{name}'", path.display())))
            })
            .collect()
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Decodes the cells of one row, given in layout column order. `None` when a
/// value is missing.
pub fn decode_row(cells: &[&str], layout: &CsvLayout) -> Result<Option<Frame>> {
    if cells.len() != layout.header().len() {
        return Err(CatpError::data(format!("row has {} cells, layout has {}", cells.len(), layout.header().len())));
    }
    if cells.iter().any(|c| is_missing(c)) {
        return Ok(None);
    }
    let number = |c: &str| {
        c.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CatpError::data(format!("'{c}' is not a number")))
    };
    let n = layout.units.len();
    let points = (0..n)
        .map(|u| Ok([number(cells[2 * u])?, number(cells[2 * u + 1])?]))
        .collect::<Result<Vec<_>>>()?;
    let states = layout
        .schema
        .states
        .iter()
        .zip(&cells[2 * n..])
        .map(|(spec, c)| match spec.kind {
            StateKind::Ranged { .. } | StateKind::Unlimited { .. } => Ok(StateValue::Number(number(c)?)),
            StateKind::Boolean { .. } | StateKind::Enumerated { .. } => Ok(StateValue::Category(c.trim().to_string())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Frame { points, states }))
}

pub fn encode_row(frame: &Frame, layout: &CsvLayout) -> Vec<String> {
    let mut cells: Vec<String> = frame.points.iter().flat_map(|p| [p[0].to_string(), p[1].to_string()]).collect();
    cells.extend(frame.states.iter().zip(&layout.schema.states).map(|(v, _)| match v {
        StateValue::Number(x) => x.to_string(),
        StateValue::Category(c) => c.clone(),
    }));
    cells
}

/// Windows of `lx + ly` rows at the given stride in a series of `n` rows.
pub fn window_count(n: usize, lx: usize, ly: usize, stride: usize) -> usize {
    if n < lx + ly || stride == 0 {
        0
    } else {
        (n - (lx + ly)) / stride + 1
    }
}

/// Runs of consecutive complete rows, each with the file row index of its first row.
type Segment = (usize, Vec<Frame>);

fn read_segments(path: &Path, layout: &CsvLayout, report: &mut IngestReport) -> Result<Vec<Segment>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CatpError::data(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| CatpError::data(format!("{}: {e}", path.display())))?.clone();
    let columns = layout.resolve(&header, path)?;
    let mut segments: Vec<Segment> = Vec::new();
    let mut current: Option<Segment> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CatpError::data(format!("{} row {}: {e}", path.display(), row + 1)))?;
        report.rows_read += 1;
        let cells: Vec<&str> = columns.iter().map(|&c| record.get(c).unwrap_or("")).collect();
        match decode_row(&cells, layout).map_err(|e| CatpError::data(format!("{} row {}: {e}", path.display(), row + 1)))? {
            Some(frame) => current.get_or_insert_with(|| (row, Vec::new())).1.push(frame),
            None => {
                report.rows_skipped += 1;
                segments.extend(current.take());
            }
        }
    }
    segments.extend(current);
    Ok(segments)
}

fn window<T: Scalar>(source: &CsvSource, frames: &[Frame], first_row: usize) -> Result<DataSample<T>> {
    let (lx, ly, lc) = (source.lx, source.ly, source.lc);
    let dt = source.dt;
    let to_points = |rows: &[Frame], u: usize| rows.iter().map(|f| [T::lit(f.points[u][0]), T::lit(f.points[u][1])]).collect();
    let past = source
        .units
        .iter()
        .enumerate()
        .map(|(u, name)| Trajectory::new(to_points(&frames[..lx], u), dt, name.clone(), first_row as f64 * dt))
        .collect::<Result<Vec<_>>>()?;
    let target = Trajectory::new(
        to_points(&frames[lx..lx + ly], source.target_unit),
        dt,
        source.units[source.target_unit].clone(),
        (first_row + lx) as f64 * dt,
    )?;
    Ok(DataSample {
        context: ContextWindow {
            frames: frames[lx - lc..lx].iter().map(|f| f.states.clone()).collect(),
        },
        past,
        target,
        target_id: source.target_unit,
        pattern: None,
    })
}

/// Sliding-window extraction of `(C, TX, TY)` samples, split 80/10/10 by
/// contiguous blocks in file order.
pub fn ingest_csv<T: Scalar>(source: &CsvSource) -> Result<(CorpusSplit<T>, IngestReport)> {
    let schema = ContextSpec::from_file(&source.schema)?;
    if source.units.is_empty() || source.target_unit >= source.units.len() {
        return Err(CatpError::config("csv source needs at least one unit and a valid target unit"));
    }
    if source.stride == 0 || source.lc == 0 || source.lx == 0 || source.ly == 0 || source.lc > source.lx {
        return Err(CatpError::config("csv sampling needs stride, LC, LX, LY > 0 and LC ≤ LX"));
    }
    if !(source.dt > 0.0 && source.max_step > 0.0) {
        return Err(CatpError::config("dt and max_step must be positive"));
    }
    let layout = CsvLayout {
        schema: schema.clone(),
        units: source.units.clone(),
    };
    let mut report = IngestReport::default();
    let mut samples = Vec::new();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(source)?);
    for path in &source.paths {
        hasher.update(std::fs::read(path).map_err(|e| CatpError::data(format!("{}: {e}", path.display())))?);
        for (first_row, frames) in read_segments(path, &layout, &mut report)? {
            let n = window_count(frames.len(), source.lx, source.ly, source.stride);
            for w in 0..n {
                let start = w * source.stride;
                samples.push(window(source, &frames[start..start + source.lx + source.ly], first_row + start)?);
            }
        }
    }
    report.samples = samples.len();
    let provenance = Provenance {
        source: "csv".into(),
        seed: 0,
        spec_hash: hex::encode(hasher.finalize()),
        round_seed: None,
    };
    let shape = WindowShape {
        lc: source.lc,
        lx: source.lx,
        ly: source.ly,
    };
    let corpus = CorpusSplit::from_ordered(schema, shape, source.max_step, provenance, samples);
    corpus.validate()?;
    Ok((corpus, report))
}
