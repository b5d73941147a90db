//! Camera intrinsics, perspective projection, camera-ray embeddings, and
//! the normalized inverse-depth translation parametrization.
//!
//! Translation is regressed as `(p_xy, p_z)` where `p_z` is inverse depth
//! normalized by focal length: `t_xy = p_xy / p_z`, `t_z = (1/p_z)·(f/f_c)`.
//! Inverse depth is linear in apparent person size, which is what makes it
//! the natural regression target.

use crate::error::{Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::nn::sinusoid_vec;
use crate::scalar::{s, Scalar};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Canonical focal length (pixels) normalizing the depth prediction.
pub const CANONICAL_FOCAL: f64 = 1000.0;

/// Minimum depth in front of the camera for projection.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length, pixels.
    pub f: f64,
    /// Principal point, pixels.
    pub cx: f64,
    pub cy: f64,
    /// Image size, pixels.
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if f <= 0.0 || width == 0 || height == 0 {
            return Err(Error::domain(
                "camera intrinsics",
                format!("f={f}, width={width}, height={height} must be positive"),
            ));
        }
        Ok(CameraIntrinsics {
            f,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Assumed intrinsics when none are known: f = 0.8·max(w, h),
    /// principal point at the image center.
    pub fn assume(width: usize, height: usize) -> Self {
        CameraIntrinsics {
            f: 0.8 * width.max(height) as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Normalized image-plane translation and inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslationParam<S: Scalar> {
    pub p_xy: [S; 2],
    /// Inverse depth, 1/meters; must be positive.
    pub p_z: S,
}

/// Decode `(p_xy, p_z)` to metric camera translation:
/// `t_xy = p_xy / p_z`, `t_z = (1/p_z)·(f/f_c)`.
pub fn decode_translation<S: Scalar>(
    p: &TranslationParam<S>,
    f: f64,
    f_c: f64,
) -> Result<[S; 3]> {
    if p.p_z <= S::zero() {
        return Err(Error::domain(
            "decode_translation",
            format!("inverse depth must be positive, got {}", p.p_z),
        ));
    }
    if f <= 0.0 || f_c <= 0.0 {
        return Err(Error::domain("decode_translation", "focal lengths must be positive"));
    }
    let inv = S::one() / p.p_z;
    Ok([
        p.p_xy[0] * inv,
        p.p_xy[1] * inv,
        inv * s::<S>(f / f_c),
    ])
}

/// Inverse of [`decode_translation`], used to build supervision targets:
/// `p_z = f/(f_c·t_z)`, `p_xy = t_xy·p_z`.
pub fn encode_translation<S: Scalar>(tau: [S; 3], f: f64, f_c: f64) -> Result<TranslationParam<S>> {
    if tau[2] <= S::zero() {
        return Err(Error::domain(
            "encode_translation",
            format!("person behind camera: t_z = {}", tau[2]),
        ));
    }
    let p_z = s::<S>(f / f_c) / tau[2];
    Ok(TranslationParam {
        p_xy: [tau[0] * p_z, tau[1] * p_z],
        p_z,
    })
}

/// Graph counterpart of [`decode_translation`]: `p_xy` 1×2, `p_z` 1×1 → τ 1×3.
pub fn decode_translation_var<S: Scalar>(
    g: &mut Graph<S>,
    p_xy: Var,
    p_z: Var,
    f: f64,
    f_c: f64,
) -> Var {
    let inv = g.unary(p_z, Unary::Recip);
    let txy = g.div_col(p_xy, p_z);
    let tz = g.scale(inv, s::<S>(f / f_c));
    g.concat_cols(&[txy, tz])
}

/// Perspective projection `u = f·x/z + cx, v = f·y/z + cy`.
///
/// Returns per-point pixels plus a validity flag; points with `z ≤ 1e-6`
/// are flagged invalid (and excluded from losses by the callers).
pub fn project<S: Scalar>(
    points: &Array2<S>,
    cam: &CameraIntrinsics,
) -> (Array2<S>, Vec<bool>) {
    assert_eq!(points.ncols(), 3, "project expects N×3 points");
    let n = points.nrows();
    let mut out = Array2::<S>::zeros((n, 2));
    let mut valid = vec![true; n];
    let f = s::<S>(cam.f);
    let (cx, cy) = (s::<S>(cam.cx), s::<S>(cam.cy));
    for i in 0..n {
        let z = points[(i, 2)];
        if z <= s::<S>(MIN_DEPTH) {
            valid[i] = false;
            continue;
        }
        out[(i, 0)] = f * points[(i, 0)] / z + cx;
        out[(i, 1)] = f * points[(i, 1)] / z + cy;
    }
    (out, valid)
}

/// Graph counterpart of [`project`] (no validity handling: callers mask).
pub fn project_var<S: Scalar>(g: &mut Graph<S>, points: Var, cam: &CameraIntrinsics) -> Var {
    let xy = g.slice_cols(points, 0, 2);
    let z = g.slice_cols(points, 2, 3);
    let persp = g.div_col(xy, z);
    let scaled = g.scale(persp, s::<S>(cam.f));
    let n = g.shape(points).0;
    let center = g.constant(Array2::from_shape_fn((n, 2), |(_, c)| {
        if c == 0 {
            s::<S>(cam.cx)
        } else {
            s::<S>(cam.cy)
        }
    }));
    g.add(scaled, center)
}

/// Width allotted to each ray component inside the ray embedding.
fn ray_block(d: usize) -> usize {
    let b = d / 3;
    b - (b % 2)
}

/// Sinusoid scale for ray components (rays live in roughly [-1, 1]).
const RAY_PE_SCALE: f64 = 100.0;

/// Per-patch unit ray directions `((u−cx)/f, (v−cy)/f, 1)/‖·‖` expanded by
/// sinusoidal features to width `d`. `grid` lists patch centers in pixels.
/// Deterministic in the intrinsics.
pub fn camera_ray_embedding<S: Scalar>(
    cam: &CameraIntrinsics,
    grid: &[(f64, f64)],
    d: usize,
) -> Array2<S> {
    let block = ray_block(d);
    let mut out = Array2::<S>::zeros((grid.len(), d));
    for (row, &(u, v)) in grid.iter().enumerate() {
        let ray = ray_direction(cam, u, v);
        for (c, &component) in ray.iter().enumerate() {
            let pe = sinusoid_vec::<S>(component * RAY_PE_SCALE, block);
            for (k, &val) in pe.iter().enumerate() {
                out[(row, c * block + k)] = val;
            }
        }
    }
    out
}

/// Unit ray through pixel (u, v).
pub fn ray_direction(cam: &CameraIntrinsics, u: f64, v: f64) -> [f64; 3] {
    let x = (u - cam.cx) / cam.f;
    let y = (v - cam.cy) / cam.f;
    let n = (x * x + y * y + 1.0).sqrt();
    [x / n, y / n, 1.0 / n]
}

/// Patch-center grid for a square token layout.
pub fn patch_centers(image_size: usize, patch: usize) -> Vec<(f64, f64)> {
    let hp = image_size / patch;
    let mut grid = Vec::with_capacity(hp * hp);
    for r in 0..hp {
        for c in 0..hp {
            grid.push((
                (c * patch) as f64 + patch as f64 / 2.0,
                (r * patch) as f64 + patch as f64 / 2.0,
            ));
        }
    }
    grid
}
