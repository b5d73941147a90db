//! Rotation helpers: Rodrigues' formula, its derivative, the log map, and
//! the continuous 6-d rotation representation.

use crate::scalar::{s, Scalar};
use ndarray::{array, Array2};

/// Below this angle Rodrigues' formula switches to its series expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Axis-angle → rotation matrix.
///
/// `R = I + A·K + B·K²` with `K = [v]×`, `A = sin θ / θ`,
/// `B = (1 − cos θ) / θ²`; series-expanded coefficients below
/// [`SMALL_ANGLE`] to avoid the 0/0 at the identity.
pub fn rodrigues<S: Scalar>(v: [S; 3]) -> Array2<S> {
    let [x, y, z] = v;
    let t2 = x * x + y * y + z * z;
    let theta = t2.sqrt();
    let (a, b) = if theta < s::<S>(SMALL_ANGLE) {
        (
            S::one() - t2 / s::<S>(6.0),
            s::<S>(0.5) - t2 / s::<S>(24.0),
        )
    } else {
        ((theta.sin()) / theta, (S::one() - theta.cos()) / t2)
    };
    let k = skew(v);
    let k2 = matmul3(&k, &k);
    let mut r = Array2::<S>::eye(3);
    r.zip_mut_with(&k, |dst, &kk| *dst = *dst + a * kk);
    r.zip_mut_with(&k2, |dst, &kk| *dst = *dst + b * kk);
    r
}

/// Vector-Jacobian product of [`rodrigues`]: given `G = dL/dR`, returns
/// `dL/dv` using the compact derivative
/// `∂R/∂v_i = (v_i [v]× + [v × ((I − R) e_i)]×) / θ² · R`,
/// which degenerates to `[e_i]×` at the identity.
pub fn rodrigues_vjp<S: Scalar>(v: [S; 3], g: &Array2<S>) -> [S; 3] {
    let [x, y, z] = v;
    let t2 = x * x + y * y + z * z;
    let r = rodrigues(v);
    let mut out = [S::zero(); 3];
    for i in 0..3 {
        let dri = if t2.sqrt() < s::<S>(SMALL_ANGLE) {
            skew(basis::<S>(i))
        } else {
            // w = v × ((I − R)·e_i): e_i selects column i of (I − R).
            let mut col = [S::zero(); 3];
            for (rr, c) in col.iter_mut().enumerate() {
                let eye = if rr == i { S::one() } else { S::zero() };
                *c = eye - r[(rr, i)];
            }
            let w = cross(v, col);
            let vi = v[i];
            let k = skew(v);
            let kw = skew(w);
            let mut m = Array2::<S>::zeros((3, 3));
            m.zip_mut_with(&k, |dst, &kk| *dst = vi * kk);
            m.zip_mut_with(&kw, |dst, &kk| *dst = *dst + kk);
            let m = m.mapv(|e| e / t2);
            matmul3(&m, &r)
        };
        let mut acc = S::zero();
        for rr in 0..3 {
            for cc in 0..3 {
                acc += g[(rr, cc)] * dri[(rr, cc)];
            }
        }
        out[i] = acc;
    }
    out
}

/// Rotation matrix → axis-angle (log map). Handles the θ→0 and θ→π limits.
pub fn log_map<S: Scalar>(r: &Array2<S>) -> [S; 3] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let cos_t = ((trace - S::one()) * s::<S>(0.5))
        .max(-S::one())
        .min(S::one());
    let theta = cos_t.acos();
    let ax = [
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ];
    if theta < s::<S>(1e-7) {
        // R ≈ I + [v]×
        return [ax[0] * s::<S>(0.5), ax[1] * s::<S>(0.5), ax[2] * s::<S>(0.5)];
    }
    if theta > s::<S>(std::f64::consts::PI - 1e-5) {
        // Near π the antisymmetric part vanishes; recover the axis from
        // the symmetric part R + I = 2(aaᵀ − I·cos... ) diagonal trick.
        let xx = ((r[(0, 0)] + S::one()) * s::<S>(0.5)).max(S::zero()).sqrt();
        let yy = ((r[(1, 1)] + S::one()) * s::<S>(0.5)).max(S::zero()).sqrt();
        let zz = ((r[(2, 2)] + S::one()) * s::<S>(0.5)).max(S::zero()).sqrt();
        // Fix signs using the largest component.
        let mut a = [xx, yy, zz];
        let imax = (0..3).max_by(|&p, &q| a[p].partial_cmp(&a[q]).unwrap()).unwrap();
        if imax == 0 {
            a[1] = a[1] * sign((r[(0, 1)] + r[(1, 0)]) * a[0]);
            a[2] = a[2] * sign((r[(0, 2)] + r[(2, 0)]) * a[0]);
        } else if imax == 1 {
            a[0] = a[0] * sign((r[(0, 1)] + r[(1, 0)]) * a[1]);
            a[2] = a[2] * sign((r[(1, 2)] + r[(2, 1)]) * a[1]);
        } else {
            a[0] = a[0] * sign((r[(0, 2)] + r[(2, 0)]) * a[2]);
            a[1] = a[1] * sign((r[(1, 2)] + r[(2, 1)]) * a[2]);
        }
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        return [a[0] / n * theta, a[1] / n * theta, a[2] / n * theta];
    }
    let k = theta / (s::<S>(2.0) * theta.sin());
    [ax[0] * k, ax[1] * k, ax[2] * k]
}

fn sign<S: Scalar>(x: S) -> S {
    if x < S::zero() {
        -S::one()
    } else {
        S::one()
    }
}

/// 6-d representation (first two matrix columns) → rotation matrix via
/// Gram–Schmidt. Non-differentiable convenience path; the decoder builds
/// the same map out of graph primitives.
pub fn rot6d_to_matrix<S: Scalar>(d6: [S; 6]) -> Array2<S> {
    let a = [d6[0], d6[1], d6[2]];
    let b = [d6[3], d6[4], d6[5]];
    let r1 = normalize(a);
    let dot = r1[0] * b[0] + r1[1] * b[1] + r1[2] * b[2];
    let u = [b[0] - dot * r1[0], b[1] - dot * r1[1], b[2] - dot * r1[2]];
    let r2 = normalize(u);
    let r3 = cross(r1, r2);
    array![
        [r1[0], r2[0], r3[0]],
        [r1[1], r2[1], r3[1]],
        [r1[2], r2[2], r3[2]],
    ]
}

/// First two columns of a rotation matrix as the 6-d representation.
pub fn matrix_to_rot6d<S: Scalar>(r: &Array2<S>) -> [S; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

pub fn skew<S: Scalar>(v: [S; 3]) -> Array2<S> {
    let z = S::zero();
    array![
        [z, -v[2], v[1]],
        [v[2], z, -v[0]],
        [-v[1], v[0], z],
    ]
}

pub fn cross<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize<S: Scalar>(v: [S; 3]) -> [S; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn basis<S: Scalar>(i: usize) -> [S; 3] {
    let mut e = [S::zero(); 3];
    e[i] = S::one();
    e
}

pub fn matmul3<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    let mut out = Array2::<S>::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Canonicalize an axis-angle so its norm lies in [0, π].
pub fn canonicalize<S: Scalar>(v: [S; 3]) -> [S; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n <= s::<S>(std::f64::consts::PI) || n == S::zero() {
        return v;
    }
    let two_pi = s::<S>(std::f64::consts::TAU);
    let reduced = n % two_pi;
    let (new_norm, flip) = if reduced > s::<S>(std::f64::consts::PI) {
        (two_pi - reduced, true)
    } else {
        (reduced, false)
    };
    let k = new_norm / n * if flip { -S::one() } else { S::one() };
    [v[0] * k, v[1] * k, v[2] * k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Vector3};
    use rand::Rng;

    fn nalgebra_rodrigues(v: [f64; 3]) -> Array2<f64> {
        let axis = Vector3::new(v[0], v[1], v[2]);
        let r = Rotation3::new(axis);
        Array2::from_shape_fn((3, 3), |(i, j)| r.matrix()[(i, j)])
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let mut rng = crate::rng::stream(11, "so3/fwd");
        for _ in 0..200 {
            let v = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ];
            let ours = rodrigues(v);
            let theirs = nalgebra_rodrigues(v);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(ours[(i, j)], theirs[(i, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rodrigues_small_angle_branch_is_smooth() {
        let r = rodrigues([1e-9f64, -1e-9, 1e-10]);
        let eye = Array2::<f64>::eye(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r[(i, j)], eye[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn log_map_inverts_rodrigues() {
        let mut rng = crate::rng::stream(12, "so3/log");
        for _ in 0..500 {
            let scale = rng.random_range(0.0..3.0f64);
            let mut v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            for x in &mut v {
                *x *= scale / n.max(1e-12);
            }
            let r = rodrigues(v);
            let back = log_map(&r);
            let r2 = rodrigues(back);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(r[(i, j)], r2[(i, j)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn rot6d_identity_block_is_identity_rotation() {
        let r = rot6d_to_matrix([1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let aa = log_map(&r);
        assert_abs_diff_eq!(aa[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aa[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aa[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rot6d_produces_orthonormal_right_handed_matrices() {
        let mut rng = crate::rng::stream(13, "so3/rot6d");
        for _ in 0..200 {
            let d6: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let r = rot6d_to_matrix(d6);
            let rt_r = matmul3(&r.t().to_owned(), &r);
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(rt_r[(i, j)], expect, epsilon = 1e-6);
                }
            }
            let det = r[(0, 0)] * (r[(1, 1)] * r[(2, 2)] - r[(1, 2)] * r[(2, 1)])
                - r[(0, 1)] * (r[(1, 0)] * r[(2, 2)] - r[(1, 2)] * r[(2, 0)])
                + r[(0, 2)] * (r[(1, 0)] * r[(2, 1)] - r[(1, 1)] * r[(2, 0)]);
            assert_abs_diff_eq!(det, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn canonicalize_reduces_norm_below_pi() {
        let v = [4.0f64, 0.0, 0.0];
        let c = canonicalize(v);
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        assert!(n <= std::f64::consts::PI);
        // Same rotation.
        let r1 = rodrigues(v);
        let r2 = rodrigues(c);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r1[(i, j)], r2[(i, j)], epsilon = 1e-12);
            }
        }
    }
}
