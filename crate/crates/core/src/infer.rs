//! Normalized grid distributions, pose prediction and mode extraction.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ImplicitDensityModel;
use crate::rotation::{project_to_so3, Rotation};
use crate::so3grid::{grid_size, EquivolumetricGrid, MAX_LEVEL};

pub const DIST_MAGIC: &[u8; 4] = b"SO3D";
pub const DIST_VERSION: u8 = 1;

/// Density of the uniform distribution on SO(3), `1/π²`.
pub const UNIFORM_DENSITY: f64 = 1.0 / (PI * PI);

/// Probability densities (mass per unit volume) over the cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDistribution {
    pub grid_level: u32,
    pub densities: Vec<f64>,
}

impl PoseDistribution {
    pub fn uniform(level: u32) -> Self {
        Self {
            grid_level: level,
            densities: vec![UNIFORM_DENSITY; grid_size(level)],
        }
    }

    /// `exp(fᵢ) / Σ exp(f) / V`, shifted by the maximum for stability.
    pub fn from_log_densities(level: u32, f: &[f64]) -> Self {
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut d: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = d.iter().sum();
        let v = PI * PI / f.len() as f64;
        d.iter_mut().for_each(|x| *x /= total * v);
        Self {
            grid_level: level,
            densities: d,
        }
    }

    /// From per-cell probability masses (renormalized to sum to one).
    pub fn from_masses(level: u32, masses: &[f64]) -> Self {
        let total: f64 = masses.iter().sum();
        let v = PI * PI / masses.len() as f64;
        Self {
            grid_level: level,
            densities: masses.iter().map(|m| m / (total * v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn cell_volume(&self) -> f64 {
        PI * PI / self.densities.len() as f64
    }

    pub fn mass(&self, cell: usize) -> f64 {
        self.densities[cell] * self.cell_volume()
    }

    pub fn masses(&self) -> Vec<f64> {
        let v = self.cell_volume();
        self.densities.iter().map(|d| d * v).collect()
    }

    /// `Σ p·V`; one for a normalized distribution.
    pub fn total_mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.cell_volume()
    }

    /// Density of the cell nearest `r`.
    pub fn density_at(&self, grid: &EquivolumetricGrid, r: &Rotation) -> f64 {
        self.densities[grid.nearest_cell(r)]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.densities)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DIST_MAGIC)?;
        w.write_all(&[DIST_VERSION, self.grid_level as u8])?;
        w.write_all(&(self.densities.len() as u64).to_le_bytes())?;
        for &d in &self.densities {
            w.write_all(&(d as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 14 || &bytes[..4] != DIST_MAGIC {
            return Err(Error::format(path, "bad magic, expected SO3D"));
        }
        if bytes[4] != DIST_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
        }
        let level = bytes[5] as u32;
        let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if level > MAX_LEVEL || n != grid_size(level) || body.len() != 4 * n {
            return Err(Error::format(
                path,
                format!("level {level} with {n} cells does not match {} payload bytes", body.len()),
            ));
        }
        let densities = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            grid_level: level,
            densities,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_distribution(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    grid: &EquivolumetricGrid,
) -> Result<PoseDistribution> {
    let f = model.forward(descriptor, grid.rotations())?;
    Ok(PoseDistribution::from_log_densities(grid.level(), &f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub steps: usize,
    pub step_size: f64,
    pub max_halvings: u32,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 1e-3,
            max_halvings: 10,
        }
    }
}

/// Iterates of projected gradient ascent; `values[t] = f(rotations[t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentTrace {
    pub start_cell: usize,
    pub rotations: Vec<Rotation>,
    pub values: Vec<f64>,
}

impl AscentTrace {
    pub fn last(&self) -> Rotation {
        *self.rotations.last().expect("trace holds the start")
    }
}

/// `M ← project(M + s·∇f)`; a step that lowers `f` is retried with `s/2`,
/// up to `max_halvings` times, and otherwise skipped.
pub fn refine_pose(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    start: Rotation,
    config: &AscentConfig,
) -> Result<(Vec<Rotation>, Vec<f64>)> {
    let (mut value, mut grad) = model.value_and_input_gradient(descriptor, &start)?;
    let mut current = start;
    let mut rotations = vec![current];
    let mut values = vec![value];
    for _ in 0..config.steps {
        let m = current.to_matrix();
        let mut s = config.step_size;
        for _ in 0..=config.max_halvings {
            let candidate = project_to_so3(&(m + grad * s))?;
            let (v, g) = model.value_and_input_gradient(descriptor, &candidate)?;
            if v >= value {
                current = candidate;
                value = v;
                grad = g;
                break;
            }
            s *= 0.5;
        }
        rotations.push(current);
        values.push(value);
    }
    Ok((rotations, values))
}

pub fn predict_pose_traced(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    grid: &EquivolumetricGrid,
    config: &AscentConfig,
) -> Result<AscentTrace> {
    let f = model.forward(descriptor, grid.rotations())?;
    let start_cell = argmax(&f);
    let start = grid.rotations()[start_cell];
    if config.steps == 0 {
        return Ok(AscentTrace {
            start_cell,
            rotations: vec![start],
            values: vec![f[start_cell]],
        });
    }
    let (rotations, values) = refine_pose(model, descriptor, start, config)?;
    Ok(AscentTrace {
        start_cell,
        rotations,
        values,
    })
}

/// Grid argmax of `f`, refined by `ascent_steps` of projected gradient ascent.
pub fn predict_pose(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    grid: &EquivolumetricGrid,
    ascent_steps: usize,
    step_size: f64,
) -> Result<Rotation> {
    let config = AscentConfig {
        steps: ascent_steps,
        step_size,
        ..AscentConfig::default()
    };
    Ok(predict_pose_traced(model, descriptor, grid, &config)?.last())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub center: Rotation,
    pub center_cell: usize,
    pub mass: f64,
    pub members: Vec<usize>,
}

impl Mode {
    /// Member-cell masses rescaled to sum to one.
    pub fn normalized_masses(&self, dist: &PoseDistribution) -> Vec<(usize, f64)> {
        let total: f64 = self.members.iter().map(|&i| dist.mass(i)).sum();
        self.members
            .iter()
            .map(|&i| (i, dist.mass(i) / total))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeSet {
    pub modes: Vec<Mode>,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.modes.iter().map(|m| m.mass).sum()
    }

    /// One JSON object per line: `{rank, quaternion, mass}`, rank from 1.
    pub fn write_json_lines(&self, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            rank: usize,
            quaternion: [f64; 4],
            mass: f64,
        }
        for (i, m) in self.modes.iter().enumerate() {
            let line = Line {
                rank: i + 1,
                quaternion: m.center.quaternion(),
                mass: m.mass,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so labels do not depend on visiting order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

pub const DEFAULT_DENSITY_FLOOR: f64 = 2.0;

/// Default link radius: twice the median nearest-neighbour spacing.
pub fn default_link_radius(grid: &EquivolumetricGrid) -> f64 {
    2.0 * grid.median_spacing()
}

/// Cells at or above `density_floor` times uniform, linked into modes when
/// their centers lie within `link_radius`; ranked by total mass.
pub fn extract_modes(
    dist: &PoseDistribution,
    grid: &EquivolumetricGrid,
    density_floor: f64,
    link_radius: f64,
) -> Result<ModeSet> {
    if !(density_floor > 0.0 && link_radius > 0.0) {
        return Err(Error::InvalidConfig(
            "density_floor and link_radius must be positive".into(),
        ));
    }
    if dist.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: dist.len(),
        });
    }
    let threshold = density_floor * UNIFORM_DENSITY;
    let kept: Vec<bool> = dist.densities.iter().map(|&d| d >= threshold).collect();
    if !kept.iter().any(|&k| k) {
        return Err(Error::EmptyModeSet);
    }
    let mut sets = DisjointSet::new(grid.len());
    for (i, r) in grid.rotations().iter().enumerate() {
        if !kept[i] {
            continue;
        }
        for j in grid.cells_within(r, link_radius) {
            if j > i && kept[j] {
                sets.union(i, j);
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..grid.len()).filter(|&i| kept[i]) {
        by_root.entry(sets.find(i)).or_default().push(i);
    }
    let mut modes: Vec<Mode> = by_root
        .into_values()
        .map(|members| {
            let center_cell = members
                .iter()
                .copied()
                .fold(members[0], |b, i| if dist.densities[i] > dist.densities[b] { i } else { b });
            Mode {
                center: grid.rotations()[center_cell],
                center_cell,
                mass: members.iter().map(|&i| dist.mass(i)).sum(),
                members,
            }
        })
        .collect();
    modes.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.center_cell.cmp(&b.center_cell)));
    Ok(ModeSet { modes })
}

/// Like [`extract_modes`], but a distribution with nothing above the floor
/// becomes one mode spanning every cell, centred on the argmax.
pub fn extract_modes_or_whole(
    dist: &PoseDistribution,
    grid: &EquivolumetricGrid,
    density_floor: f64,
    link_radius: f64,
) -> Result<ModeSet> {
    match extract_modes(dist, grid, density_floor, link_radius) {
        Err(Error::EmptyModeSet) => {
            let center_cell = dist.argmax();
            Ok(ModeSet {
                modes: vec![Mode {
                    center: grid.rotations()[center_cell],
                    center_cell,
                    mass: dist.total_mass(),
                    members: (0..dist.len()).collect(),
                }],
            })
        }
        other => other,
    }
}

/// Centers of the `k` heaviest modes (fewer if there are fewer modes).
pub fn top_k_candidates(modes: &ModeSet, k: usize) -> Vec<Rotation> {
    modes.modes.iter().take(k).map(|m| m.center).collect()
}
