//! 3×3 rotation-matrix helpers and Euler-angle conversion.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Euler channel order, read left to right as declared in a BVH `CHANNELS` line.
///
/// The composed rotation is the product of single-axis rotations in the same
/// order, e.g. `Zxy` gives `Rz(a0) · Rx(a1) · Ry(a2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EulerOrder {
    Zxy,
    Zyx,
    Xyz,
}

impl EulerOrder {
    /// Axis index (0 = X, 1 = Y, 2 = Z) of each channel.
    pub fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
            EulerOrder::Xyz => [0, 1, 2],
        }
    }

    pub fn from_axes(axes: [usize; 3]) -> Result<Self> {
        match axes {
            [2, 0, 1] => Ok(EulerOrder::Zxy),
            [2, 1, 0] => Ok(EulerOrder::Zyx),
            [0, 1, 2] => Ok(EulerOrder::Xyz),
            other => {
                let name: String = other.iter().map(|&a| ['X', 'Y', 'Z'][a.min(2)]).collect();
                Err(Error::config(format!("unsupported Euler order {name}")))
            }
        }
    }
}

impl FromStr for EulerOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ZXY" => Ok(EulerOrder::Zxy),
            "ZYX" => Ok(EulerOrder::Zyx),
            "XYZ" => Ok(EulerOrder::Xyz),
            _ => Err(Error::config(format!("unsupported Euler order {s:?}"))),
        }
    }
}

impl fmt::Display for EulerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EulerOrder::Zxy => "ZXY",
            EulerOrder::Zyx => "ZYX",
            EulerOrder::Xyz => "XYZ",
        };
        f.write_str(s)
    }
}

/// Rotation by `angle` radians about coordinate axis `axis`.
pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Converts Euler angles in degrees, given in channel order, to a rotation matrix.
pub fn euler_to_rotmat(angles_deg: [f64; 3], order: EulerOrder) -> Mat3 {
    let axes = order.axes();
    let r0 = axis_rotation(axes[0], angles_deg[0].to_radians());
    let r1 = axis_rotation(axes[1], angles_deg[1].to_radians());
    let r2 = axis_rotation(axes[2], angles_deg[2].to_radians());
    matmul(&matmul(&r0, &r1), &r2)
}

/// Inverse of [`euler_to_rotmat`]; the middle angle is returned in [-90°, 90°].
pub fn rotmat_to_euler(r: &Mat3, order: EulerOrder) -> [f64; 3] {
    let [i, j, k] = order.axes();
    // +1 for cyclic axis permutations, -1 otherwise.
    let sign = if (j + 3 - i) % 3 == 1 { 1.0 } else { -1.0 };
    let middle = (sign * r[i][k]).clamp(-1.0, 1.0).asin();
    let first = (-sign * r[j][k]).atan2(r[k][k]);
    let last = (-sign * r[i][j]).atan2(r[i][i]);
    [first.to_degrees(), middle.to_degrees(), last.to_degrees()]
}

/// Rodrigues formula: rotation vector (axis × angle, radians) to matrix.
pub fn exp_map(v: [f64; 3]) -> Mat3 {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let k = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
    let k2 = matmul(&k, &k);
    // sin(θ)/θ and (1-cos θ)/θ² with series fallback near zero.
    let (a, b) = if theta < 1e-6 {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let mut out = IDENTITY;
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] += a * k[r][c] + b * k2[r][c];
        }
    }
    out
}

/// Geodesic angle in radians between two rotations.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let rel = matmul(&transpose(a), b);
    let cos = (rel[0][0] + rel[1][1] + rel[2][2] - 1.0) * 0.5;
    let sin = 0.5
        * ((rel[2][1] - rel[1][2]).powi(2) + (rel[0][2] - rel[2][0]).powi(2) + (rel[1][0] - rel[0][1]).powi(2))
            .sqrt();
    sin.atan2(cos)
}

/// Largest violation of `RᵀR = I` and `det R = 1`.
pub fn rotation_error(r: &Mat3) -> f64 {
    let rtr = matmul(&transpose(r), r);
    let mut worst: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst.max((det(r) - 1.0).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_angles_give_identity() {
        for order in [EulerOrder::Zxy, EulerOrder::Zyx, EulerOrder::Xyz] {
            assert!(close(&euler_to_rotmat([0.0; 3], order), &IDENTITY, 0.0));
        }
    }

    #[test]
    fn ninety_degrees_about_third_axis() {
        let r = euler_to_rotmat([0.0, 0.0, 90.0], EulerOrder::Xyz);
        // first column is the image of the x axis
        let col0 = [r[0][0], r[1][0], r[2][0]];
        assert!((col0[0]).abs() < 1e-15 && (col0[1] - 1.0).abs() < 1e-15 && col0[2].abs() < 1e-15);
        assert!(rotation_error(&r) < 1e-10);
    }

    #[test]
    fn composed_order_matches_explicit_product() {
        // Independent construction: quaternion product of single-axis quaternions.
        fn quat(axis: usize, deg: f64) -> [f64; 4] {
            let h = deg.to_radians() / 2.0;
            let mut q = [h.cos(), 0.0, 0.0, 0.0];
            q[axis + 1] = h.sin();
            q
        }
        fn qmul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        }
        fn qmat(q: [f64; 4]) -> Mat3 {
            let [w, x, y, z] = q;
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ]
        }
        // ZXY: Rz(30) Rx(45) Ry(60)
        let q = qmul(qmul(quat(2, 30.0), quat(0, 45.0)), quat(1, 60.0));
        let expected = qmat(q);
        let got = euler_to_rotmat([30.0, 45.0, 60.0], EulerOrder::Zxy);
        assert!(close(&got, &expected, 1e-12), "{got:?} vs {expected:?}");
        assert!(rotation_error(&got) < 1e-10);
    }

    #[test]
    fn unknown_order_is_config_error() {
        assert!(matches!("YXZ".parse::<EulerOrder>(), Err(Error::Config(_))));
        assert!(EulerOrder::from_axes([1, 0, 2]).is_err());
    }

    #[test]
    fn geodesic_of_axis_rotation() {
        let r = axis_rotation(1, 0.3);
        assert!((geodesic_distance(&IDENTITY, &r) - 0.3).abs() < 1e-14);
        assert!((geodesic_distance(&r, &r)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn euler_round_trip(a in -179.0f64..179.0, b in -89.0f64..89.0, c in -179.0f64..179.0) {
            for order in [EulerOrder::Zxy, EulerOrder::Zyx, EulerOrder::Xyz] {
                let r = euler_to_rotmat([a, b, c], order);
                prop_assert!(rotation_error(&r) < 1e-10);
                let back = rotmat_to_euler(&r, order);
                let r2 = euler_to_rotmat(back, order);
                prop_assert!(close(&r, &r2, 1e-12));
                prop_assert!((back[1] - b).abs() < 1e-8);
            }
        }

        #[test]
        fn exp_map_is_rotation(x in -1.8f64..1.8, y in -1.8f64..1.8, z in -1.8f64..1.8) {
            let r = exp_map([x, y, z]);
            prop_assert!(rotation_error(&r) < 1e-12);
            let angle = (x * x + y * y + z * z).sqrt();
            prop_assert!((geodesic_distance(&IDENTITY, &r) - angle).abs() < 1e-9);
        }
    }
}
