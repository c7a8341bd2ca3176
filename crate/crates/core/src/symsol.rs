//! Synthetic symmetric-object poses with closed-form ground truth.
//!
//! Descriptors are exact invariants of the pose under the object's symmetry
//! group, so the distribution a perfect model should predict is known: uniform
//! over the orbit `{gt·g}` for the group kinds, a full orbit circle (or two)
//! for cone and cylinder, and either a single pose or a half-space for the
//! marked sphere.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Rotation;
use crate::so3grid::EquivolumetricGrid;

/// Default sampling of continuous orbits: 1° steps.
pub const DEFAULT_ORBIT_SAMPLES: usize = 360;
pub const DEFAULT_DESCRIPTOR_DIM: usize = 16;

const DEDUP_TOL: f64 = 1e-9;
const LEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SymmetryKind {
    #[serde(rename = "tet")]
    Tetrahedron,
    #[serde(rename = "cube")]
    Cube,
    #[serde(rename = "ico")]
    Icosahedron,
    #[serde(rename = "cone")]
    Cone,
    #[serde(rename = "cyl")]
    Cylinder,
    #[serde(rename = "sphereX")]
    SphereX,
}

impl SymmetryKind {
    pub const ALL: [SymmetryKind; 6] = [
        SymmetryKind::Tetrahedron,
        SymmetryKind::Cube,
        SymmetryKind::Icosahedron,
        SymmetryKind::Cone,
        SymmetryKind::Cylinder,
        SymmetryKind::SphereX,
    ];

    pub fn is_discrete(self) -> bool {
        matches!(
            self,
            SymmetryKind::Tetrahedron | SymmetryKind::Cube | SymmetryKind::Icosahedron
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SymmetryKind::Tetrahedron => "tet",
            SymmetryKind::Cube => "cube",
            SymmetryKind::Icosahedron => "ico",
            SymmetryKind::Cone => "cone",
            SymmetryKind::Cylinder => "cyl",
            SymmetryKind::SphereX => "sphereX",
        }
    }

    /// Length of the invariant vector before the random map.
    fn feature_len(self) -> usize {
        match self {
            SymmetryKind::Cone => 3,
            SymmetryKind::SphereX => 7,
            _ => 9,
        }
    }
}

impl fmt::Display for SymmetryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SymmetryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "tet" | "tetrahedron" => SymmetryKind::Tetrahedron,
            "cube" => SymmetryKind::Cube,
            "ico" | "icosahedron" => SymmetryKind::Icosahedron,
            "cone" => SymmetryKind::Cone,
            "cyl" | "cylinder" => SymmetryKind::Cylinder,
            "spherex" => SymmetryKind::SphereX,
            _ => return Err(Error::InvalidConfig(format!("unknown shape kind `{s}`"))),
        })
    }
}

/// Symmetry rotations of a shape. Continuous kinds carry a sampled orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryGroup {
    pub kind: SymmetryKind,
    pub elements: Vec<Rotation>,
}

fn contains(set: &[Rotation], r: &Rotation) -> bool {
    set.iter().any(|s| s.approx_eq(r, DEDUP_TOL))
}

/// Smallest set containing the identity and closed under composition with
/// the generators.
pub fn close_under(generators: &[Rotation]) -> Vec<Rotation> {
    let mut elements = vec![Rotation::identity()];
    let mut frontier = elements.clone();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for a in &frontier {
            for g in generators {
                let c = a.compose(g);
                if !contains(&elements, &c) {
                    elements.push(c);
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    elements
}

fn diag111() -> Vector3<f64> {
    Vector3::new(1.0, 1.0, 1.0)
}

pub fn build_group(kind: SymmetryKind) -> Result<SymmetryGroup> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let generators = match kind {
        SymmetryKind::Tetrahedron => vec![
            Rotation::from_axis_angle(diag111(), 2.0 * PI / 3.0),
            Rotation::about_z(PI),
        ],
        SymmetryKind::Cube => vec![
            Rotation::about_z(PI / 2.0),
            Rotation::from_axis_angle(diag111(), 2.0 * PI / 3.0),
        ],
        // 5-fold axis through the vertex (0, 1, φ), 3-fold through a face centre
        SymmetryKind::Icosahedron => vec![
            Rotation::from_axis_angle(Vector3::new(0.0, 1.0, phi), 2.0 * PI / 5.0),
            Rotation::from_axis_angle(diag111(), 2.0 * PI / 3.0),
        ],
        _ => {
            return Err(Error::InvalidConfig(format!(
                "{kind} has a continuous symmetry; use sampled_group"
            )))
        }
    };
    Ok(SymmetryGroup {
        kind,
        elements: close_under(&generators),
    })
}

/// Group for any kind; continuous symmetries are sampled at `samples` angles.
/// For sphereX the pose-independent part is the identity alone.
pub fn sampled_group(kind: SymmetryKind, samples: usize) -> Result<SymmetryGroup> {
    if kind.is_discrete() {
        return build_group(kind);
    }
    let circle = |flip: bool| {
        (0..samples).map(move |k| {
            let rz = Rotation::about_z(2.0 * PI * k as f64 / samples as f64);
            if flip {
                Rotation::about_x(PI).compose(&rz)
            } else {
                rz
            }
        })
    };
    let elements = match kind {
        SymmetryKind::Cone => circle(false).collect(),
        SymmetryKind::Cylinder => circle(false).chain(circle(true)).collect(),
        _ => vec![Rotation::identity()],
    };
    Ok(SymmetryGroup { kind, elements })
}

/// `{gt·g}` deduplicated within 1e-9.
pub fn orbit(gt: &Rotation, group: &SymmetryGroup) -> Vec<Rotation> {
    let mut out: Vec<Rotation> = Vec::with_capacity(group.elements.len());
    for g in &group.elements {
        let r = gt.compose(g);
        if !contains(&out, &r) {
            out.push(r);
        }
    }
    out
}

fn lex_less(a: &[f64; 9], b: &[f64; 9]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > LEX_TOL {
            return x < y;
        }
    }
    false
}

/// Orbit member whose row-major matrix is lexicographically smallest.
pub fn canonical_representative(gt: &Rotation, group: &SymmetryGroup) -> Rotation {
    let mut best = gt.compose(&group.elements[0]);
    let mut best_m = best.to_matrix_row_major();
    for g in &group.elements[1..] {
        let r = gt.compose(g);
        let m = r.to_matrix_row_major();
        if lex_less(&m, &best_m) {
            best = r;
            best_m = m;
        }
    }
    best
}

/// Is the sphereX marker (`gt·e_x`) facing the viewer?
pub fn marker_visible(gt: &Rotation) -> bool {
    gt.rotate(&Vector3::x()).z > 0.0
}

/// Fixed random linear map from invariant features to descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    kind: SymmetryKind,
    matrix: DMatrix<f64>,
    group: SymmetryGroup,
}

impl DescriptorMap {
    /// The map depends only on `(kind, dim)`, so train and test sets share it.
    pub fn new(kind: SymmetryKind, dim: usize) -> Self {
        let k = kind.feature_len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + kind as u64);
        let scale = 1.0 / (k as f64).sqrt();
        let matrix = DMatrix::from_fn(dim, k, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        let group = sampled_group(kind, 1).expect("every kind has a group");
        Self {
            kind,
            matrix,
            group,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn features(&self, gt: &Rotation) -> Vec<f64> {
        let m = gt.to_matrix();
        match self.kind {
            SymmetryKind::Cone => {
                let a = m.column(2);
                vec![a[0], a[1], a[2]]
            }
            SymmetryKind::Cylinder => {
                let a = m.column(2);
                (0..9).map(|i| a[i / 3] * a[i % 3]).collect()
            }
            SymmetryKind::SphereX => {
                if marker_visible(gt) {
                    let (ex, ey) = (m.column(0), m.column(1));
                    vec![1.0, ex[0], ex[1], ex[2], ey[0], ey[1], ey[2]]
                } else {
                    vec![0.0; 7]
                }
            }
            _ => canonical_representative(gt, &self.group)
                .to_matrix_row_major()
                .to_vec(),
        }
    }

    /// Descriptor with additive Gaussian noise, rounded to f32 precision so
    /// that it survives the dataset file unchanged.
    pub fn descriptor<R: Rng + ?Sized>(&self, gt: &Rotation, noise_sigma: f64, rng: &mut R) -> Vec<f64> {
        let f = nalgebra::DVector::from_vec(self.features(gt));
        let d = &self.matrix * f;
        let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
        d.iter()
            .map(|&v| {
                let v = if noise_sigma > 0.0 { v + noise.sample(rng) } else { v };
                v as f32 as f64
            })
            .collect()
    }
}

pub fn make_descriptor(gt: &Rotation, kind: SymmetryKind, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    DescriptorMap::new(kind, DEFAULT_DESCRIPTOR_DIM).descriptor(gt, noise_sigma, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(rename = "d", with = "f32_vec")]
    pub descriptor: Vec<f64>,
    #[serde(rename = "q", with = "quat")]
    pub gt_rotation: Rotation,
    pub kind: SymmetryKind,
}

mod f32_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| x as f32).collect::<Vec<f32>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<f32>::deserialize(d)?.into_iter().map(f64::from).collect())
    }
}

mod quat {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::rotation::Rotation;

    pub fn serialize<S: Serializer>(r: &Rotation, s: S) -> Result<S::Ok, S::Error> {
        r.quaternion().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rotation, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        Rotation::try_from_quaternion(q).map_err(D::Error::custom)
    }
}

pub fn generate_dataset(
    kind: SymmetryKind,
    n: usize,
    noise_sigma: f64,
    seed: u64,
) -> Vec<DatasetRecord> {
    generate_dataset_with_dim(kind, n, noise_sigma, seed, DEFAULT_DESCRIPTOR_DIM)
}

/// Record `i` draws from its own stream of a generator seeded by `seed`.
pub fn generate_dataset_with_dim(
    kind: SymmetryKind,
    n: usize,
    noise_sigma: f64,
    seed: u64,
    dim: usize,
) -> Vec<DatasetRecord> {
    let map = DescriptorMap::new(kind, dim);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let gt = Rotation::random(&mut rng);
            DatasetRecord {
                descriptor: map.descriptor(&gt, noise_sigma, &mut rng),
                gt_rotation: gt,
                kind,
            }
        })
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Every rotation equivalent to the annotation, or `None` when that set is
/// not finite (hidden sphereX marker: a half-space).
pub fn full_ground_truth(record: &DatasetRecord, samples: usize) -> Option<Vec<Rotation>> {
    let gt = record.gt_rotation;
    match record.kind {
        SymmetryKind::SphereX if !marker_visible(&gt) => None,
        SymmetryKind::SphereX => Some(vec![gt]),
        k => Some(orbit(&gt, &sampled_group(k, samples).ok()?)),
    }
}

/// Per-cell probability mass of the ideal prediction for `record`.
pub fn ideal_masses(record: &DatasetRecord, grid: &EquivolumetricGrid, samples: usize) -> Vec<f64> {
    let mut mass = vec![0.0; grid.len()];
    match full_ground_truth(record, samples) {
        Some(members) => {
            let w = 1.0 / members.len() as f64;
            for r in &members {
                mass[grid.nearest_cell(r)] += w;
            }
        }
        None => {
            let hidden: Vec<usize> = grid
                .rotations()
                .iter()
                .enumerate()
                .filter(|(_, r)| !marker_visible(r))
                .map(|(i, _)| i)
                .collect();
            let w = 1.0 / hidden.len() as f64;
            for i in hidden {
                mass[i] = w;
            }
        }
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{geodesic_distance, haar_angle_cdf, sample_uniform};

    #[test]
    fn group_orders() {
        assert_eq!(build_group(SymmetryKind::Tetrahedron).unwrap().elements.len(), 12);
        assert_eq!(build_group(SymmetryKind::Cube).unwrap().elements.len(), 24);
        assert_eq!(build_group(SymmetryKind::Icosahedron).unwrap().elements.len(), 60);
        assert!(build_group(SymmetryKind::Cone).is_err());
    }

    #[test]
    fn group_axioms() {
        for kind in [SymmetryKind::Tetrahedron, SymmetryKind::Cube, SymmetryKind::Icosahedron] {
            let g = build_group(kind).unwrap().elements;
            assert!(contains(&g, &Rotation::identity()));
            for a in &g {
                assert!(contains(&g, &a.inverse()), "{kind}: inverse");
                let m = a.to_matrix();
                assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-12);
                assert!((m.determinant() - 1.0).abs() < 1e-12);
                for b in &g {
                    assert!(contains(&g, &a.compose(b)), "{kind}: closure");
                }
            }
        }
    }

    #[test]
    fn cube_group_is_signed_permutations_with_det_one() {
        // independent oracle: all 3x3 signed permutation matrices of det +1
        let g = build_group(SymmetryKind::Cube).unwrap().elements;
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut count = 0;
        for p in perms {
            for signs in 0..8 {
                let m = nalgebra::Matrix3::from_fn(|i, j| {
                    if p[i] == j {
                        if signs >> i & 1 == 1 { -1.0 } else { 1.0 }
                    } else {
                        0.0
                    }
                });
                if m.determinant() > 0.0 {
                    count += 1;
                    assert!(contains(&g, &Rotation::from_matrix(&m)));
                }
            }
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn cube_min_orbit_distance_is_quarter_turn() {
        let g = build_group(SymmetryKind::Cube).unwrap().elements;
        let mut min = f64::INFINITY;
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                min = min.min(geodesic_distance(a, b));
            }
        }
        assert!((min - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn identity_orbit_of_cube_is_the_group() {
        let g = build_group(SymmetryKind::Cube).unwrap();
        let o = orbit(&Rotation::identity(), &g);
        assert_eq!(o.len(), 24);
        assert!(o.iter().all(|r| contains(&g.elements, r)));
    }

    #[test]
    fn cone_orbit_shares_axis() {
        let gt = sample_uniform(3, 1)[0];
        let o = orbit(&gt, &sampled_group(SymmetryKind::Cone, 360).unwrap());
        assert_eq!(o.len(), 360);
        let a = gt.rotate(&Vector3::z());
        for r in &o {
            assert!((r.rotate(&Vector3::z()) - a).norm() < 1e-9);
        }
    }

    #[test]
    fn cylinder_orbit_is_two_disjoint_circles() {
        let gt = sample_uniform(4, 1)[0];
        let o = orbit(&gt, &sampled_group(SymmetryKind::Cylinder, 90).unwrap());
        assert_eq!(o.len(), 180);
        let a = gt.rotate(&Vector3::z());
        let (up, down): (Vec<_>, Vec<_>) = o.iter().partition(|r| r.rotate(&Vector3::z()).dot(&a) > 0.0);
        assert_eq!((up.len(), down.len()), (90, 90));
        let mut min = f64::INFINITY;
        for u in &up {
            for d in &down {
                min = min.min(geodesic_distance(u, d));
            }
        }
        assert!(min > 0.1, "{min}");
    }

    #[test]
    fn descriptors_are_orbit_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [SymmetryKind::Tetrahedron, SymmetryKind::Cube, SymmetryKind::Icosahedron] {
            let map = DescriptorMap::new(kind, 16);
            let g = build_group(kind).unwrap();
            for gt in sample_uniform(kind as u64, 10) {
                let d0 = map.descriptor(&gt, 0.0, &mut rng);
                for r in orbit(&gt, &g) {
                    assert_eq!(map.descriptor(&r, 0.0, &mut rng), d0, "{kind}");
                }
            }
        }
        let cyl = DescriptorMap::new(SymmetryKind::Cylinder, 16);
        let cone = DescriptorMap::new(SymmetryKind::Cone, 16);
        for gt in sample_uniform(9, 20) {
            let flipped = gt.compose(&Rotation::about_x(PI));
            assert_eq!(cyl.descriptor(&gt, 0.0, &mut rng), cyl.descriptor(&flipped, 0.0, &mut rng));
            let spun = gt.compose(&Rotation::about_z(0.83));
            let (a, b) = (cone.descriptor(&gt, 0.0, &mut rng), cone.descriptor(&spun, 0.0, &mut rng));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn descriptors_separate_cosets() {
        let map = DescriptorMap::new(SymmetryKind::Cube, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rs = sample_uniform(5, 2);
        assert_ne!(map.descriptor(&rs[0], 0.0, &mut rng), map.descriptor(&rs[1], 0.0, &mut rng));
    }

    #[test]
    fn hidden_marker_gives_constant_descriptor() {
        let map = DescriptorMap::new(SymmetryKind::SphereX, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = vec![0.0; 16];
        let mut seen = (0, 0);
        for gt in sample_uniform(6, 200) {
            let d = map.descriptor(&gt, 0.0, &mut rng);
            if marker_visible(&gt) {
                seen.0 += 1;
                assert_ne!(d, zero);
            } else {
                seen.1 += 1;
                assert_eq!(d, zero);
            }
        }
        assert!(seen.0 > 50 && seen.1 > 50);
    }

    #[test]
    fn dataset_is_deterministic_and_haar() {
        assert_eq!(
            generate_dataset(SymmetryKind::Cube, 10, 0.01, 3),
            generate_dataset(SymmetryKind::Cube, 10, 0.01, 3)
        );
        let data = generate_dataset(SymmetryKind::Cube, 1000, 0.0, 8);
        let mut angles: Vec<f64> = data.iter().map(|r| r.gt_rotation.angle()).collect();
        angles.sort_by(f64::total_cmp);
        let n = angles.len() as f64;
        let ks = angles
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let c = haar_angle_cdf(t);
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "{ks}");
    }

    #[test]
    fn record_order_independent_of_count() {
        let a = generate_dataset(SymmetryKind::Cone, 5, 0.1, 1);
        let b = generate_dataset(SymmetryKind::Cone, 8, 0.1, 1);
        assert_eq!(a[..], b[..5]);
    }

    #[test]
    fn dataset_file_round_trip() {
        let data = generate_dataset(SymmetryKind::SphereX, 20, 0.05, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &data).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.len(), 20);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.descriptor, b.descriptor);
            assert!(a.gt_rotation.approx_eq(&b.gt_rotation, 1e-15));
            assert_eq!(a.kind, b.kind);
        }
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.lines().next().unwrap().contains("\"kind\":\"sphereX\""));
        std::fs::write(&p, "{not json}\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn kind_names_parse() {
        for k in SymmetryKind::ALL {
            assert_eq!(k.name().parse::<SymmetryKind>().unwrap(), k);
        }
        assert!("torus".parse::<SymmetryKind>().is_err());
    }
}
