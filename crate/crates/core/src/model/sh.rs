//! Real spherical harmonics up to degree 3, in the layout used by reference
//! Gaussian splatting checkpoints.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of basis functions for a given degree, `(L + 1)^2`.
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Fills `out` with the basis values at the unit direction `d`.
/// `out.len()` selects the degree.
pub fn basis(d: &Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let n = out.len();
    out[0] = SH_C0;
    if n > 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (xx - yy);
        if n > 9 {
            out[9] = SH_C3[0] * y * (3.0 * xx - yy);
            out[10] = SH_C3[1] * x * y * z;
            out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = SH_C3[5] * z * (xx - yy);
            out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unnormalized) direction components.
pub fn basis_grad(d: &Vector3<f64>, out: &mut [Vector3<f64>]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let n = out.len();
    out[0] = Vector3::zeros();
    if n > 1 {
        out[1] = Vector3::new(0.0, -SH_C1, 0.0);
        out[2] = Vector3::new(0.0, 0.0, SH_C1);
        out[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
        out[5] = SH_C2[1] * Vector3::new(0.0, z, y);
        out[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        out[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
        out[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        if n > 9 {
            out[9] = SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
            out[10] = SH_C3[1] * Vector3::new(y * z, x * z, x * y);
            out[11] = SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
            out[12] = SH_C3[3]
                * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
            out[14] = SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
            out[15] = SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
        }
    }
}

/// Convert an RGB color in [0, 1] to the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: &Vector3<f64>) -> Vector3<f64> {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y00_matches_closed_form() {
        let expected = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
        assert!((SH_C0 - expected).abs() < 1e-15);
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.5, 0.8);
        let mut grad = vec![Vector3::zeros(); 16];
        basis_grad(&d, &mut grad);
        let h = 1e-6;
        for axis in 0..3 {
            let mut plus = d;
            let mut minus = d;
            plus[axis] += h;
            minus[axis] -= h;
            let mut bp = [0.0; 16];
            let mut bm = [0.0; 16];
            basis(&plus, &mut bp);
            basis(&minus, &mut bm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - grad[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn degree_one_basis_is_orthonormal_on_the_sphere() {
        // crude quadrature on a fibonacci sphere
        let n = 20_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut gram = [[0.0; 16]; 16];
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let d = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let mut b = [0.0; 16];
            basis(&d, &mut b);
            for a in 0..16 {
                for c in 0..16 {
                    gram[a][c] += b[a] * b[c] * 4.0 * std::f64::consts::PI / n as f64;
                }
            }
        }
        for a in 0..16 {
            for c in 0..16 {
                let expected = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] - expected).abs() < 1e-3, "({a},{c}) = {}", gram[a][c]);
            }
        }
    }
}
