//! Sphere-plus-colour plots of distributions over SO(3).
//!
//! Each rotation becomes a point on the 2-sphere (where it sends a canonical
//! axis) and a tilt angle about that point (drawn as hue). The sphere is
//! flattened with the equal-area Mollweide projection.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{PoseDistribution, UNIFORM_DENSITY};
use crate::rotation::Rotation;
use crate::so3grid::EquivolumetricGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalAxis {
    X,
    Y,
    #[default]
    Z,
}

impl FromStr for CanonicalAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(CanonicalAxis::X),
            "y" | "Y" => Ok(CanonicalAxis::Y),
            "z" | "Z" => Ok(CanonicalAxis::Z),
            _ => Err(Error::InvalidConfig(format!("axis must be x, y or z, got `{s}`"))),
        }
    }
}

impl CanonicalAxis {
    /// Rotation `C` with `C·e_z = e_axis` that cycles the coordinate axes.
    fn cycle(self) -> Rotation {
        let third = 2.0 * PI / 3.0;
        let diag = Vector3::new(1.0, 1.0, 1.0);
        match self {
            CanonicalAxis::Z => Rotation::identity(),
            // e_x → e_y → e_z → e_x
            CanonicalAxis::X => Rotation::from_axis_angle(diag, third),
            // e_x → e_z → e_y → e_x
            CanonicalAxis::Y => Rotation::from_axis_angle(diag, -third),
        }
    }
}

/// Rotation carrying `e_z` to `d` along the great circle between them.
/// At the south pole the limit frame `Rx(π)` is used.
fn transport_frame(d: &Vector3<f64>) -> Rotation {
    let axis = Vector3::new(-d.y, d.x, 0.0);
    let s = axis.norm();
    if s == 0.0 {
        return if d.z > 0.0 {
            Rotation::identity()
        } else {
            Rotation::about_x(PI)
        };
    }
    Rotation::from_axis_angle(axis, s.atan2(d.z))
}

/// Direction `r·e_axis` and the tilt about it, in `[0, 2π)`.
pub fn hopf_split(r: &Rotation, axis: CanonicalAxis) -> (Vector3<f64>, f64) {
    let r = r.compose(&axis.cycle());
    let d = r.rotate(&Vector3::z());
    let residual = transport_frame(&d).inverse().compose(&r);
    let m = residual.to_matrix();
    let tilt = m[(1, 0)].atan2(m[(0, 0)]).rem_euclid(2.0 * PI);
    (d, if tilt >= 2.0 * PI { 0.0 } else { tilt })
}

/// Inverse of [`hopf_split`].
pub fn hopf_join(direction: &Vector3<f64>, tilt: f64, axis: CanonicalAxis) -> Rotation {
    let d = direction.normalize();
    transport_frame(&d)
        .compose(&Rotation::about_z(tilt))
        .compose(&axis.cycle().inverse())
}

/// Latitude and longitude of a unit vector.
pub fn lat_lon(d: &Vector3<f64>) -> (f64, f64) {
    (d.z.clamp(-1.0, 1.0).asin(), d.y.atan2(d.x))
}

/// Mollweide projection; `x ∈ [−2√2, 2√2]`, `y ∈ [−√2, √2]`.
pub fn mollweide(lat: f64, lon: f64) -> (f64, f64) {
    let t = if lat.abs() >= FRAC_PI_2 {
        FRAC_PI_2.copysign(lat)
    } else {
        let target = PI * lat.sin();
        let mut t = lat;
        for _ in 0..50 {
            let f = 2.0 * t + (2.0 * t).sin() - target;
            let df = 2.0 + 2.0 * (2.0 * t).cos();
            if df == 0.0 {
                break;
            }
            let step = f / df;
            t -= step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        t
    };
    (2.0 * SQRT_2 / PI * lon * t.cos(), SQRT_2 * t.sin())
}

/// Inverse Mollweide projection, returning `(lat, lon)`.
pub fn inverse_mollweide(x: f64, y: f64) -> (f64, f64) {
    let t = (y / SQRT_2).clamp(-1.0, 1.0).asin();
    let lat = ((2.0 * t + (2.0 * t).sin()) / PI).clamp(-1.0, 1.0).asin();
    let c = t.cos();
    let lon = if c.abs() < 1e-15 { 0.0 } else { PI * x / (2.0 * SQRT_2 * c) };
    (lat, lon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizConfig {
    pub canonical_axis: CanonicalAxis,
    /// Dot radius for a cell holding all the mass, as a fraction of width/20.
    pub size_scale: f64,
    /// Cells below this multiple of the uniform density are not drawn.
    pub density_floor: f64,
    pub width: u32,
    /// Rotations drawn as unfilled outlines.
    pub ground_truth: Option<Vec<Rotation>>,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            canonical_axis: CanonicalAxis::Z,
            size_scale: 1.0,
            density_floor: 2.0,
            width: 800,
            ground_truth: None,
        }
    }
}

impl VizConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !(self.density_floor >= 0.0) {
            return Err(Error::InvalidConfig("width must be > 0 and floor >= 0".into()));
        }
        Ok(())
    }
}

/// Hue in `[0, 1)` to a fully saturated `#rrggbb`.
fn hue_hex(h: f64) -> String {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (v * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(r), c(g), c(b))
}

/// Pixel geometry of the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
    pub scale: f64,
}

impl Canvas {
    pub fn new(width: u32) -> Self {
        let width = width as f64;
        let scale = width / (4.0 * SQRT_2 * 1.05);
        Self {
            width,
            height: (2.0 * SQRT_2 * 1.05 * scale).round(),
            scale,
        }
    }

    pub fn to_pixels(&self, x: f64, y: f64) -> (f64, f64) {
        (self.width / 2.0 + self.scale * x, self.height / 2.0 - self.scale * y)
    }

    pub fn from_pixels(&self, px: f64, py: f64) -> (f64, f64) {
        ((px - self.width / 2.0) / self.scale, (self.height / 2.0 - py) / self.scale)
    }

    /// Pixel position of a sphere direction.
    pub fn project(&self, d: &Vector3<f64>) -> (f64, f64) {
        let (lat, lon) = lat_lon(d);
        let (x, y) = mollweide(lat, lon);
        self.to_pixels(x, y)
    }

    /// Sphere direction drawn at a pixel position.
    pub fn unproject(&self, px: f64, py: f64) -> Vector3<f64> {
        let (x, y) = self.from_pixels(px, py);
        let (lat, lon) = inverse_mollweide(x, y);
        Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
    }
}

/// A rotation to draw with the given probability mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dot {
    pub rotation: Rotation,
    pub mass: f64,
}

fn svg_header(out: &mut String, c: &Canvas) {
    let _ = writeln!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = c.width,
        h = c.height
    );
    let _ = writeln!(out, "<rect width=\"{}\" height=\"{}\" fill=\"white\"/>", c.width, c.height);
}

fn polyline(out: &mut String, c: &Canvas, pts: impl Iterator<Item = (f64, f64)>) {
    let coords: Vec<String> = pts
        .map(|(lat, lon)| {
            let (x, y) = mollweide(lat, lon);
            let (px, py) = c.to_pixels(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        "<polyline class=\"graticule\" points=\"{}\" fill=\"none\" stroke=\"#c8c8c8\" stroke-width=\"0.7\"/>",
        coords.join(" ")
    );
}

fn graticule(out: &mut String, c: &Canvas) {
    out.push_str("<g id=\"graticule\">\n");
    for k in -6..=6 {
        let lon = (30 * k) as f64;
        polyline(
            out,
            c,
            (-90..=90).map(move |lat| ((lat as f64).to_radians(), lon.to_radians())),
        );
    }
    for k in -2..=2 {
        let lat = ((30 * k) as f64).to_radians();
        polyline(out, c, (-180..=180).map(move |lon| (lat, (lon as f64).to_radians())));
    }
    out.push_str("</g>\n");
}

/// SVG of explicit dots; the dot radius grows with the square root of mass.
pub fn render_points_svg(dots: &[Dot], config: &VizConfig) -> Result<String> {
    config.validate()?;
    let c = Canvas::new(config.width);
    let unit = config.size_scale * c.width / 20.0;
    let mut out = String::new();
    svg_header(&mut out, &c);
    graticule(&mut out, &c);
    out.push_str("<g id=\"density\">\n");
    for dot in dots {
        let (d, tilt) = hopf_split(&dot.rotation, config.canonical_axis);
        let (px, py) = c.project(&d);
        let _ = writeln!(
            out,
            "<circle class=\"dot\" cx=\"{px:.4}\" cy=\"{py:.4}\" r=\"{:.3}\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            (unit * dot.mass.max(0.0).sqrt()).max(0.5),
            hue_hex(tilt / (2.0 * PI))
        );
    }
    out.push_str("</g>\n");
    if let Some(gt) = &config.ground_truth {
        out.push_str("<g id=\"ground-truth\">\n");
        let radius = (unit * 0.3).max(3.0);
        for r in gt {
            let (d, tilt) = hopf_split(r, config.canonical_axis);
            let (px, py) = c.project(&d);
            let _ = writeln!(
                out,
                "<circle class=\"gt\" cx=\"{px:.4}\" cy=\"{py:.4}\" r=\"{radius:.3}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
                hue_hex(tilt / (2.0 * PI))
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Cells at or above the display floor, in grid order.
pub fn visible_dots(dist: &PoseDistribution, grid: &EquivolumetricGrid, floor: f64) -> Result<Vec<Dot>> {
    if dist.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: dist.len(),
        });
    }
    let threshold = floor * UNIFORM_DENSITY;
    Ok(grid
        .rotations()
        .iter()
        .zip(&dist.densities)
        .enumerate()
        .filter(|(_, (_, &p))| p >= threshold && p > 0.0)
        .map(|(i, (r, _))| Dot {
            rotation: *r,
            mass: dist.mass(i),
        })
        .collect())
}

pub fn render_svg(dist: &PoseDistribution, grid: &EquivolumetricGrid, config: &VizConfig) -> Result<String> {
    render_points_svg(&visible_dots(dist, grid, config.density_floor)?, config)
}

pub fn render(
    dist: &PoseDistribution,
    grid: &EquivolumetricGrid,
    config: &VizConfig,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(out_path, render_svg(dist, grid, config)?)?;
    Ok(())
}

/// `(cx, cy)` of every element with the given class, in document order.
pub fn circle_centers(svg: &str, class: &str) -> Vec<(f64, f64)> {
    let marker = format!("class=\"{class}\"");
    let attr = |line: &str, name: &str| -> Option<f64> {
        let key = format!(" {name}=\"");
        let start = line.find(&key)? + key.len();
        let end = start + line[start..].find('"')?;
        line[start..end].parse().ok()
    };
    svg.lines()
        .filter(|l| l.contains(&marker))
        .filter_map(|l| Some((attr(l, "cx")?, attr(l, "cy")?)))
        .collect()
}
