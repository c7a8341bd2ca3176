//! Wall-clock cost of evaluating a full grid distribution for one descriptor.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{evaluate_distribution, PoseDistribution};
use crate::metrics::median;
use crate::model::ImplicitDensityModel;
use crate::so3grid::generate_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub level: u32,
    pub cells: usize,
    /// Seconds per repetition, warmup excluded.
    pub timings: Vec<f64>,
    pub median_seconds: f64,
    pub frames_per_second: f64,
    pub cells_per_second: f64,
}

/// Times `evaluate_distribution` over a level-`level` grid. One warmup run
/// is discarded; the grid is built beforehand and not timed.
pub fn time_inference(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    level: u32,
    repetitions: usize,
) -> Result<(Timing, PoseDistribution)> {
    if repetitions < 3 {
        return Err(Error::InvalidConfig("repetitions must be >= 3".into()));
    }
    let grid = generate_grid(level)?;
    let mut dist = evaluate_distribution(model, descriptor, &grid)?;
    let mut timings = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        dist = evaluate_distribution(model, descriptor, &grid)?;
        timings.push(start.elapsed().as_secs_f64());
    }
    let median_seconds = median(&timings);
    Ok((
        Timing {
            level,
            cells: grid.len(),
            median_seconds,
            frames_per_second: 1.0 / median_seconds,
            cells_per_second: grid.len() as f64 / median_seconds,
            timings,
        },
        dist,
    ))
}

pub fn write_timings(mut w: impl Write, rows: &[Timing]) -> Result<()> {
    writeln!(w, "level,cells,median_seconds,fps")?;
    for t in rows {
        writeln!(w, "{},{},{:.6},{:.4}", t.level, t.cells, t.median_seconds, t.frames_per_second)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv(path: impl AsRef<Path>, rows: &[Timing]) -> Result<()> {
    write_timings(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}
