//! Ring-scheme HEALPix pixel centers.

use std::f64::consts::{FRAC_PI_2, PI};

pub fn pixel_count(nside: u64) -> u64 {
    12 * nside * nside
}

/// Center of ring-scheme pixel `p` as `(z, φ)`, with `z = cos θ`.
pub fn pixel_center_z_phi(nside: u64, p: u64) -> (f64, f64) {
    let npix = pixel_count(nside);
    debug_assert!(p < npix);
    let ncap = 2 * nside * (nside - 1);
    let nf = nside as f64;
    if p < ncap {
        // north polar cap, ring counted from the north pole
        let i = isqrt(1 + 2 * p).div_ceil(2);
        let j = p + 1 - 2 * i * (i - 1);
        let z = 1.0 - (i * i) as f64 / (3.0 * nf * nf);
        let phi = (j as f64 - 0.5) * FRAC_PI_2 / i as f64;
        (z, phi)
    } else if p < npix - ncap {
        let q = p - ncap;
        let i = q / (4 * nside) + nside;
        let j = q % (4 * nside) + 1;
        let shift = if (i + nside) % 2 == 1 { 1.0 } else { 0.5 };
        let z = 4.0 / 3.0 - 2.0 * i as f64 / (3.0 * nf);
        let phi = (j as f64 - shift) * PI / (2.0 * nf);
        (z, phi)
    } else {
        let q = npix - p;
        let i = isqrt(2 * q - 1).div_ceil(2);
        let j = 4 * i + 1 - (q - 2 * i * (i - 1));
        let z = -1.0 + (i * i) as f64 / (3.0 * nf * nf);
        let phi = (j as f64 - 0.5) * FRAC_PI_2 / i as f64;
        (z, phi)
    }
}

/// Center of pixel `p` as `(colatitude θ, longitude φ)`.
pub fn pixel_center(nside: u64, p: u64) -> (f64, f64) {
    let (z, phi) = pixel_center_z_phi(nside, p);
    (z.clamp(-1.0, 1.0).acos(), phi)
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}
