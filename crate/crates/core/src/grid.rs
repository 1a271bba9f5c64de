//! Trajectory records and their aggregation into a space-time speed grid.
//!
//! Positions are measured in feet from the upstream end of the study segment
//! and times in seconds from the start of the study window. A grid cell
//! (i, j) covers `[i*ls, (i+1)*ls) x [j*lt, (j+1)*lt)`; a cell's value is the
//! arithmetic mean speed of every record falling inside it.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::fmt::sig9;

/// One speed measurement of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub vehicle_id: u64,
    pub time_s: f64,
    pub position_ft: f64,
    pub speed_fts: f64,
}

impl TrajectoryRecord {
    fn validate(&self, row: usize) -> Result<()> {
        let bad = |reason: &str| Error::MalformedRecord {
            row,
            reason: reason.to_string(),
        };
        if !self.time_s.is_finite() || self.time_s < 0.0 {
            return Err(bad("time must be finite and non-negative"));
        }
        if !self.position_ft.is_finite() || self.position_ft < 0.0 {
            return Err(bad("position must be finite and non-negative"));
        }
        if !self.speed_fts.is_finite() || self.speed_fts < 0.0 {
            return Err(bad("speed must be finite and non-negative"));
        }
        Ok(())
    }
}

/// A gridded speed field with an observation mask.
///
/// `values[[i, j]]` is meaningful only where `mask[[i, j]]` is true;
/// unobserved cells hold `0.0` as an inert sentinel. `origin` is the
/// physical coordinate (feet, seconds) of cell (0, 0)'s lower corner.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedField {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub ls: f64,
    pub lt: f64,
    pub origin: (f64, f64),
}

impl SpeedField {
    /// (space cells, time cells).
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn num_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Fraction of cells without an observation.
    pub fn missing_rate(&self) -> f64 {
        let (n, t) = self.dims();
        1.0 - self.num_observed() as f64 / (n * t) as f64
    }

    /// Frobenius norm over observed cells only.
    pub fn observed_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(self.mask.iter())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// True when both fields share resolution, origin, and shape.
    pub fn same_lattice(&self, other: &SpeedField) -> bool {
        self.dims() == other.dims()
            && (self.ls - other.ls).abs() <= 1e-9
            && (self.lt - other.lt).abs() <= 1e-9
            && (self.origin.0 - other.origin.0).abs() <= 1e-9
            && (self.origin.1 - other.origin.1).abs() <= 1e-9
    }
}

/// Result of partitioning vehicles into probe (train) and held-out (test)
/// sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySplit {
    pub train: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
    pub seed: u64,
    /// Requested probe fraction, not the realized ratio.
    pub fraction: f64,
}

fn check_resolution(ls: f64, lt: f64) -> Result<()> {
    if !ls.is_finite() || ls <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "space resolution must be positive, got {ls}"
        )));
    }
    if !lt.is_finite() || lt <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "time resolution must be positive, got {lt}"
        )));
    }
    Ok(())
}

/// Aggregate records into a grid anchored at the physical origin (0, 0).
///
/// The extent is set by the largest position and time present, so a boundary
/// coordinate (an exact multiple of the resolution) lands in the
/// higher-indexed cell. When `vehicle_filter` is given, only records of
/// listed vehicles contribute.
pub fn aggregate(
    records: &[TrajectoryRecord],
    ls: f64,
    lt: f64,
    vehicle_filter: Option<&BTreeSet<u64>>,
) -> Result<SpeedField> {
    check_resolution(ls, lt)?;

    let keep = |r: &TrajectoryRecord| vehicle_filter.is_none_or(|f| f.contains(&r.vehicle_id));

    let mut max_pos = f64::NEG_INFINITY;
    let mut max_time = f64::NEG_INFINITY;
    let mut kept = 0usize;
    for (idx, rec) in records.iter().enumerate() {
        rec.validate(idx + 1)?;
        if keep(rec) {
            max_pos = max_pos.max(rec.position_ft);
            max_time = max_time.max(rec.time_s);
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::NoObservations(
            "no records left after vehicle filtering".to_string(),
        ));
    }

    let n = (max_pos / ls).floor() as usize + 1;
    let t = (max_time / lt).floor() as usize + 1;
    let mut sums = Array2::<f64>::zeros((n, t));
    let mut counts = Array2::<u64>::zeros((n, t));
    for rec in records.iter().filter(|r| keep(r)) {
        let i = (rec.position_ft / ls).floor() as usize;
        let j = (rec.time_s / lt).floor() as usize;
        sums[[i, j]] += rec.speed_fts;
        counts[[i, j]] += 1;
    }

    let mask = counts.mapv(|c| c > 0);
    let mut values = Array2::<f64>::zeros((n, t));
    ndarray::Zip::from(&mut values)
        .and(&sums)
        .and(&counts)
        .for_each(|v, &s, &c| {
            if c > 0 {
                *v = s / c as f64;
            }
        });

    Ok(SpeedField {
        values,
        mask,
        ls,
        lt,
        origin: (0.0, 0.0),
    })
}

/// Drop leading and trailing all-unobserved rows and columns, shifting the
/// origin accordingly. Interior gaps are never touched.
pub fn trim_empty_borders(field: &SpeedField) -> Result<SpeedField> {
    let (n, t) = field.dims();
    let row_used: Vec<bool> = (0..n).map(|i| (0..t).any(|j| field.mask[[i, j]])).collect();
    let col_used: Vec<bool> = (0..t).map(|j| (0..n).any(|i| field.mask[[i, j]])).collect();

    let first_row = row_used.iter().position(|&u| u).ok_or(Error::EmptyField)?;
    let last_row = row_used.iter().rposition(|&u| u).unwrap();
    let first_col = col_used.iter().position(|&u| u).ok_or(Error::EmptyField)?;
    let last_col = col_used.iter().rposition(|&u| u).unwrap();

    let values = field
        .values
        .slice(ndarray::s![first_row..=last_row, first_col..=last_col])
        .to_owned();
    let mask = field
        .mask
        .slice(ndarray::s![first_row..=last_row, first_col..=last_col])
        .to_owned();

    Ok(SpeedField {
        values,
        mask,
        ls: field.ls,
        lt: field.lt,
        origin: (
            field.origin.0 + first_row as f64 * field.ls,
            field.origin.1 + first_col as f64 * field.lt,
        ),
    })
}

/// Partition the distinct vehicle ids into a probe set of size
/// `round(fraction * n)` and its complement, reproducibly from `seed`.
pub fn split_trajectories(
    records: &[TrajectoryRecord],
    fraction: f64,
    seed: u64,
) -> Result<TrajectorySplit> {
    if !fraction.is_finite() || fraction <= 0.0 || fraction > 1.0 {
        return Err(Error::InvalidFraction(fraction));
    }
    let ids: Vec<u64> = records
        .iter()
        .map(|r| r.vehicle_id)
        .collect::<BTreeSet<u64>>()
        .into_iter()
        .collect();
    if ids.is_empty() {
        return Err(Error::NoObservations("no vehicle ids to split".to_string()));
    }

    let k = (fraction * ids.len() as f64).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .collect();

    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (idx, &id) in ids.iter().enumerate() {
        if chosen.contains(&idx) {
            train.insert(id);
        } else {
            test.insert(id);
        }
    }
    Ok(TrajectorySplit {
        train,
        test,
        seed,
        fraction,
    })
}

const TRAJECTORY_HEADER: [&str; 4] = ["vehicle_id", "time_s", "position_ft", "speed_fts"];

/// Read trajectory records from CSV with the exact header
/// `vehicle_id,time_s,position_ft,speed_fts`.
pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            row: 0,
            reason: format!("cannot read header: {e}"),
        })?;
        let got: Vec<&str> = headers.iter().collect();
        if got != TRAJECTORY_HEADER {
            return Err(Error::Parse {
                row: 0,
                reason: format!(
                    "expected header {:?}, got {:?}",
                    TRAJECTORY_HEADER.join(","),
                    got.join(",")
                ),
            });
        }
    }

    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| Error::MalformedRecord {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(Error::MalformedRecord {
                row,
                reason: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| Error::MalformedRecord {
                row,
                reason: format!("cannot parse {name} {:?}", &rec[i]),
            })
        };
        let vehicle_id = rec[0].parse::<u64>().map_err(|_| Error::MalformedRecord {
            row,
            reason: format!("cannot parse vehicle_id {:?}", &rec[0]),
        })?;
        let record = TrajectoryRecord {
            vehicle_id,
            time_s: field(1, "time_s")?,
            position_ft: field(2, "position_ft")?,
            speed_fts: field(3, "speed_fts")?,
        };
        record.validate(row)?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_trajectory_csv<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "{}", TRAJECTORY_HEADER.join(","))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.vehicle_id,
            sig9(r.time_s),
            sig9(r.position_ft),
            sig9(r.speed_fts)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Write a field as CSV: one line per space cell, one column per time cell,
/// unobserved cells left empty.
pub fn write_grid_csv<W: Write>(writer: W, field: &SpeedField) -> Result<()> {
    let (n, t) = field.dims();
    let mut w = std::io::BufWriter::new(writer);
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for j in 0..t {
            if j > 0 {
                line.push(',');
            }
            if field.mask[[i, j]] {
                line.push_str(&sig9(field.values[[i, j]]));
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a grid CSV written by [`write_grid_csv`]. Empty cells become
/// unobserved; the origin is taken to be (0, 0).
pub fn read_grid_csv<R: Read>(reader: R, ls: f64, lt: f64) -> Result<SpeedField> {
    check_resolution(ls, lt)?;
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        if idx > 0 && line.is_empty() {
            continue;
        }
        let mut cells = Vec::new();
        for raw in line.split(',') {
            let raw = raw.trim();
            if raw.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    reason: format!("cannot parse cell {raw:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        reason: format!("non-finite cell {raw:?}"),
                    });
                }
                cells.push(Some(v));
            }
        }
        if let Some(first) = rows.first() {
            if cells.len() != first.len() {
                return Err(Error::Parse {
                    row,
                    reason: format!(
                        "inconsistent column count: expected {}, got {}",
                        first.len(),
                        cells.len()
                    ),
                });
            }
        }
        rows.push(cells);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::EmptyField);
    }

    let (n, t) = (rows.len(), rows[0].len());
    let mut values = Array2::<f64>::zeros((n, t));
    let mut mask = Array2::<bool>::from_elem((n, t), false);
    for (i, r) in rows.iter().enumerate() {
        for (j, cell) in r.iter().enumerate() {
            if let Some(v) = cell {
                values[[i, j]] = *v;
                mask[[i, j]] = true;
            }
        }
    }
    Ok(SpeedField {
        values,
        mask,
        ls,
        lt,
        origin: (0.0, 0.0),
    })
}

/// Write an observation mask as CSV of 0/1 cells.
pub fn write_mask_csv<W: Write>(writer: W, mask: &Array2<bool>) -> Result<()> {
    let (n, t) = mask.dim();
    let mut w = std::io::BufWriter::new(writer);
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for j in 0..t {
            if j > 0 {
                line.push(',');
            }
            line.push(if mask[[i, j]] { '1' } else { '0' });
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask_csv<R: Read>(reader: R) -> Result<Array2<bool>> {
    let mut rows: Vec<Vec<bool>> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        if idx > 0 && line.is_empty() {
            continue;
        }
        let mut cells = Vec::new();
        for raw in line.split(',') {
            match raw.trim() {
                "0" => cells.push(false),
                "1" => cells.push(true),
                other => {
                    return Err(Error::Parse {
                        row,
                        reason: format!("mask cell must be 0 or 1, got {other:?}"),
                    })
                }
            }
        }
        if let Some(first) = rows.first() {
            if cells.len() != first.len() {
                return Err(Error::Parse {
                    row,
                    reason: format!(
                        "inconsistent column count: expected {}, got {}",
                        first.len(),
                        cells.len()
                    ),
                });
            }
        }
        rows.push(cells);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::EmptyField);
    }
    let (n, t) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_fn((n, t), |(i, j)| rows[i][j]))
}
