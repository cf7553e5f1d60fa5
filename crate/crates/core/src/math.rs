//! Fixed-size vector, matrix and quaternion helpers.
//!
//! Quaternions are `[w, x, y, z]`. Matrices are row-major `[[T; 3]; 3]`.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
pub type Quat<T> = [T; 4];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3<T: Real>(a: &Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn identity_quat<T: Real>() -> Quat<T> {
    [T::one(), T::zero(), T::zero(), T::zero()]
}

pub fn identity3<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn quat_norm<T: Real>(q: &Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalizes `q`; a zero quaternion maps to the identity.
pub fn quat_normalize<T: Real>(q: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    if n <= T::zero() || !n.is_finite() {
        return identity_quat();
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Backward of [`quat_normalize`] for a nonzero input.
pub fn quat_normalize_backward<T: Real>(q: &Quat<T>, grad_out: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    if n <= T::zero() || !n.is_finite() {
        return [T::zero(); 4];
    }
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let d = u[0] * grad_out[0] + u[1] * grad_out[1] + u[2] * grad_out[2] + u[3] * grad_out[3];
    std::array::from_fn(|i| (grad_out[i] - u[i] * d) / n)
}

/// Hamilton product `p ⊗ q`.
pub fn quat_mul<T: Real>(p: &Quat<T>, q: &Quat<T>) -> Quat<T> {
    [
        p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3],
        p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2],
        p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1],
        p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0],
    ]
}

/// Returns `(dL/dp, dL/dq)` for `r = p ⊗ q`.
pub fn quat_mul_backward<T: Real>(p: &Quat<T>, q: &Quat<T>, g: &Quat<T>) -> (Quat<T>, Quat<T>) {
    // r is bilinear: r = L(p) q = R(q) p.
    let gp = [
        g[0] * q[0] + g[1] * q[1] + g[2] * q[2] + g[3] * q[3],
        -g[0] * q[1] + g[1] * q[0] - g[2] * q[3] + g[3] * q[2],
        -g[0] * q[2] + g[1] * q[3] + g[2] * q[0] - g[3] * q[1],
        -g[0] * q[3] - g[1] * q[2] + g[2] * q[1] + g[3] * q[0],
    ];
    let gq = [
        g[0] * p[0] + g[1] * p[1] + g[2] * p[2] + g[3] * p[3],
        -g[0] * p[1] + g[1] * p[0] + g[2] * p[3] - g[3] * p[2],
        -g[0] * p[2] - g[1] * p[3] + g[2] * p[0] + g[3] * p[1],
        -g[0] * p[3] + g[1] * p[2] - g[2] * p[1] + g[3] * p[0],
    ];
    (gp, gq)
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat<T: Real>(q: &Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = *q;
    let (one, two) = (T::one(), T::lit(2.0));
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Gradient of `quat_to_mat` (as a polynomial in the four components).
pub fn quat_to_mat_backward<T: Real>(q: &Quat<T>, g: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = *q;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let gw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1]) - four * x * (g[1][1] + g[2][2]);
    let gy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]) - four * y * (g[0][0] + g[2][2]);
    let gz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1]) - four * z * (g[0][0] + g[1][1]);
    [gw, gx, gy, gz]
}

pub fn matmul3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

pub fn transpose3<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn matvec3<T: Real>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Canonical sign: returns `q` or `-q` so that `w >= 0`.
pub fn quat_canonical<T: Real>(q: &Quat<T>) -> Quat<T> {
    if q[0] < T::zero() {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        *q
    }
}

/// Symmetric 3x3 eigenvalues (ascending), by the trigonometric method.
pub fn sym3_eigenvalues(a: &Mat3<f64>) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let mut eig = if p1 == 0.0 {
        [a[0][0], a[1][1], a[2][2]]
    } else {
        let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b: Mat3<f64> = std::array::from_fn(|i| std::array::from_fn(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p));
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let r = (det / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    eig.sort_by(|a, b| a.total_cmp(b));
    eig
}
