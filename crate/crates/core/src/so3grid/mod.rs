//! Hierarchical equivolumetric grids on SO(3).
//!
//! Level `L` threads `6·2^L` Hopf-fibre tilt angles through each of the
//! `12·4^L` HEALPix pixel centers at `nside = 2^L`, giving `72·8^L` cells of
//! equal volume `π²/N`. Cells are ordered pixel-major, then by tilt.

pub mod healpix;
pub mod index;

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rotation::{Rotation, ROTATION_BYTES};
use index::RotationIndex;

pub const MAX_LEVEL: u32 = 6;

/// Level tag used in rotation files that are not full grids (orbit dumps).
pub const NON_GRID_LEVEL: u8 = u8::MAX;

const GRID_MAGIC: &[u8; 4] = b"SO3G";
const GRID_VERSION: u8 = 1;

pub fn grid_size(level: u32) -> usize {
    72 * 8usize.pow(level)
}

pub fn healpix_nside(level: u32) -> u64 {
    1 << level
}

pub fn tilt_count(level: u32) -> usize {
    6 << level
}

/// Hopf-coordinate quaternion for sphere point `(θ, φ)` and fibre angle `ψ`.
pub fn hopf_to_rotation(theta: f64, phi: f64, psi: f64) -> Rotation {
    let (st, ct) = (theta / 2.0).sin_cos();
    let (sp, cp) = (psi / 2.0).sin_cos();
    let a = phi + psi / 2.0;
    Rotation::from_quaternion(ct * cp, ct * sp, st * a.cos(), st * a.sin())
}

#[derive(Debug)]
pub struct EquivolumetricGrid {
    level: u32,
    rotations: Vec<Rotation>,
    index: OnceLock<RotationIndex>,
}

impl Clone for EquivolumetricGrid {
    fn clone(&self) -> Self {
        Self {
            level: self.level,
            rotations: self.rotations.clone(),
            index: OnceLock::new(),
        }
    }
}

impl PartialEq for EquivolumetricGrid {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level && self.rotations == other.rotations
    }
}

pub fn generate_grid(level: u32) -> Result<EquivolumetricGrid> {
    if level > MAX_LEVEL {
        return Err(Error::LevelTooLarge {
            level,
            max: MAX_LEVEL,
        });
    }
    let nside = healpix_nside(level);
    let tilts = tilt_count(level);
    let step = 2.0 * PI / tilts as f64;
    let rotations: Vec<Rotation> = (0..healpix::pixel_count(nside))
        .into_par_iter()
        .flat_map_iter(|p| {
            let (theta, phi) = healpix::pixel_center(nside, p);
            (0..tilts).map(move |k| hopf_to_rotation(theta, phi, (k as f64 + 0.5) * step))
        })
        .collect();
    debug_assert_eq!(rotations.len(), grid_size(level));
    Ok(EquivolumetricGrid {
        level,
        rotations,
        index: OnceLock::new(),
    })
}

impl EquivolumetricGrid {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn cell_volume(&self) -> f64 {
        PI * PI / self.rotations.len() as f64
    }

    fn index(&self) -> &RotationIndex {
        self.index.get_or_init(|| RotationIndex::build(&self.rotations))
    }

    /// Cell whose center is geodesically nearest to `r` (ties to lowest index).
    pub fn nearest_cell(&self, r: &Rotation) -> usize {
        self.index()
            .nearest(&self.rotations, r)
            .expect("grids are never empty")
    }

    /// Reference linear scan; always agrees with [`Self::nearest_cell`].
    pub fn nearest_cell_linear(&self, r: &Rotation) -> usize {
        index::nearest_linear(&self.rotations, r).expect("grids are never empty")
    }

    /// Cells whose centers lie within geodesic distance `radius` of `r`, ascending.
    pub fn cells_within(&self, r: &Rotation, radius: f64) -> Vec<usize> {
        let min_dot = if radius >= PI { 0.0 } else { (radius / 2.0).cos() };
        self.index().within(&self.rotations, r, min_dot)
    }

    /// Distance from each cell center to its nearest other center.
    pub fn nearest_neighbor_distances(&self) -> Vec<f64> {
        let idx = self.index();
        self.rotations
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let j = idx
                    .nearest_excluding(&self.rotations, r, Some(i))
                    .expect("grid has more than one cell");
                r.distance_to(&self.rotations[j])
            })
            .collect()
    }

    pub fn median_spacing(&self) -> f64 {
        let mut d = self.nearest_neighbor_distances();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }

    pub fn mean_spacing(&self) -> f64 {
        let d = self.nearest_neighbor_distances();
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rotation_file(path, self.level as u8, &self.rotations)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (level, rotations) = read_rotation_file(path)?;
        if level as u32 > MAX_LEVEL || rotations.len() != grid_size(level as u32) {
            return Err(Error::format(
                path,
                format!("level {level} does not match count {}", rotations.len()),
            ));
        }
        Ok(Self {
            level: level as u32,
            rotations,
            index: OnceLock::new(),
        })
    }
}

/// Left-translates the grid so that cell 0 lands on `target`:
/// `{target · R₀⁻¹ · Rᵢ}`.
pub fn rotate_grid(grid: &EquivolumetricGrid, target: &Rotation) -> Vec<Rotation> {
    let shift = target.compose(&grid.rotations[0].inverse());
    let mut out: Vec<Rotation> = grid.rotations.iter().map(|r| shift.compose(r)).collect();
    out[0] = *target;
    out
}

/// Writes `SO3G` v1: magic, version, level tag, u64 count, quaternions.
pub fn write_rotation_file(path: impl AsRef<Path>, level: u8, rotations: &[Rotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&[GRID_VERSION, level])?;
    w.write_all(&(rotations.len() as u64).to_le_bytes())?;
    for r in rotations {
        w.write_all(&r.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rotation_file(path: impl AsRef<Path>) -> Result<(u8, Vec<Rotation>)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 14];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[..4] != GRID_MAGIC {
        return Err(Error::format(path, "bad magic, expected SO3G"));
    }
    if header[4] != GRID_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header[4])));
    }
    let level = header[5];
    let count = u64::from_le_bytes(header[6..14].try_into().unwrap()) as usize;
    let mut rotations = Vec::with_capacity(count.min(1 << 26));
    let mut buf = [0u8; ROTATION_BYTES];
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, format!("truncated at rotation {i} of {count}")))?;
        rotations.push(
            Rotation::from_le_bytes(&buf).map_err(|e| Error::format(path, e.to_string()))?,
        );
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok((level, rotations))
}
