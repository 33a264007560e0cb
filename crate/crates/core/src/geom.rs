//! 3D geometry kernels: affine transforms in normalized grid coordinates,
//! backward-warp resampling of volumes, masks and feature maps.
//!
//! Transforms act on normalized coordinates in `[-1, 1]` per axis so the same
//! parameterization applies to grids of any resolution. `warp_*` functions
//! implement backward warping: every output voxel pulls its value from the
//! input at the affine-mapped coordinate, with out-of-bounds samples reading
//! as zero.

use ndarray::{Array3, Array4};
use thiserror::Error;

/// Determinant threshold below which a linear part is treated as singular.
pub const DET_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("singular transform: |det| = {0:.3e} <= 1e-8")]
    SingularTransform(f64),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A 3D scalar grid with voxel spacing in mm. Shape is `(W, H, D)` indexed
/// as `[x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self, GeomError> {
        let dim = data.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(GeomError::InvalidVolume(format!(
                "all dims must be >= 1, got {:?}",
                dim
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(GeomError::InvalidVolume(format!(
                "spacing components must be positive, got {:?}",
                spacing
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::InvalidVolume(
                "volume contains non-finite values".into(),
            ));
        }
        Ok(Self { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }
}

/// A 3D weight grid with values in `[0, 1]`. When `hard` is set the values
/// are restricted to `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub data: Array3<f32>,
    pub hard: bool,
}

impl MaskVolume {
    pub fn new(data: Array3<f32>, hard: bool) -> Result<Self, GeomError> {
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(GeomError::InvalidVolume(
                "mask values must lie in [0, 1]".into(),
            ));
        }
        if hard && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(GeomError::InvalidVolume(
                "hard mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self { data, hard })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// Number of foreground voxels (for hard masks this is the voxel count).
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Encoder output: `C_f` channels sharing one spatial grid, shape
/// `(C_f, W, H, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f32>,
}

impl FeatureMap {
    pub fn new(data: Array4<f32>) -> Result<Self, GeomError> {
        if data.dim().0 == 0 {
            return Err(GeomError::InvalidVolume("C_f must be >= 1".into()));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.1, d.2, d.3]
    }
}

/// Invertible 3D affine map `u -> M u + t` on normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            matrix: Self::identity().matrix,
            translation: t,
        }
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self {
            matrix: [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]],
            translation: [0.0; 3],
        }
    }

    /// Rotation from per-axis Euler angles in radians, applied as Rz·Ry·Rx.
    pub fn rotation(rx: f64, ry: f64, rz: f64) -> Self {
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let rx_m = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry_m = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz_m = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        Self {
            matrix: mat_mul(&rz_m, &mat_mul(&ry_m, &rx_m)),
            translation: [0.0; 3],
        }
    }

    pub fn from_params(p: &[f64; 12]) -> Self {
        Self {
            matrix: [
                [p[0], p[1], p[2]],
                [p[3], p[4], p[5]],
                [p[6], p[7], p[8]],
            ],
            translation: [p[9], p[10], p[11]],
        }
    }

    pub fn to_params(&self) -> [f64; 12] {
        let m = &self.matrix;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            self.translation[0], self.translation[1], self.translation[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Exact (bitwise) identity check; used for the lossless warp fast path.
    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.translation[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.translation[2],
        ]
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn check_invertible(t: &AffineTransform) -> Result<(), GeomError> {
    let det = t.det();
    if det.abs() <= DET_EPS {
        return Err(GeomError::SingularTransform(det.abs()));
    }
    Ok(())
}

/// Composition such that warping with `compose(a, b)` equals warping by `a`
/// first and then by `b`; as a coordinate map this is `x -> b(a(x))`.
pub fn compose(a: &AffineTransform, b: &AffineTransform) -> Result<AffineTransform, GeomError> {
    check_invertible(a)?;
    check_invertible(b)?;
    let m = mat_mul(&b.matrix, &a.matrix);
    let bt = b.matrix;
    let t = [
        bt[0][0] * a.translation[0] + bt[0][1] * a.translation[1] + bt[0][2] * a.translation[2]
            + b.translation[0],
        bt[1][0] * a.translation[0] + bt[1][1] * a.translation[1] + bt[1][2] * a.translation[2]
            + b.translation[1],
        bt[2][0] * a.translation[0] + bt[2][1] * a.translation[1] + bt[2][2] * a.translation[2]
            + b.translation[2],
    ];
    Ok(AffineTransform {
        matrix: m,
        translation: t,
    })
}

/// Exact inverse map: `u -> M^-1 (u - t)`.
pub fn invert(t: &AffineTransform) -> Result<AffineTransform, GeomError> {
    let det = t.det();
    if det.abs() <= DET_EPS {
        return Err(GeomError::SingularTransform(det.abs()));
    }
    let m = &t.matrix;
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    let tr = &t.translation;
    let new_t = [
        -(inv[0][0] * tr[0] + inv[0][1] * tr[1] + inv[0][2] * tr[2]),
        -(inv[1][0] * tr[0] + inv[1][1] * tr[1] + inv[1][2] * tr[2]),
        -(inv[2][0] * tr[0] + inv[2][1] * tr[1] + inv[2][2] * tr[2]),
    ];
    Ok(AffineTransform {
        matrix: inv,
        translation: new_t,
    })
}

// ---------------------------------------------------------------------------
// Normalized-coordinate mapping
// ---------------------------------------------------------------------------

/// Voxel index `i in [0, n)` to normalized coordinate in `[-1, 1]`
/// (grid corners pinned; a single-voxel axis maps to 0).
#[inline]
pub fn index_to_norm(i: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i / (n - 1) as f64 - 1.0
    }
}

/// Normalized coordinate back to a fractional voxel index.
#[inline]
pub fn norm_to_index(u: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (u + 1.0) * 0.5 * (n - 1) as f64
    }
}

#[inline]
fn sample_trilinear(data: &Array3<f32>, j: [f64; 3]) -> f32 {
    let (w, h, d) = data.dim();
    let x0 = j[0].floor();
    let y0 = j[1].floor();
    let z0 = j[2].floor();
    let fx = j[0] - x0;
    let fy = j[1] - y0;
    let fz = j[2] - z0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let z0 = z0 as isize;
    let mut acc = 0.0f64;
    for cx in 0..2isize {
        let xi = x0 + cx;
        if xi < 0 || xi >= w as isize {
            continue;
        }
        let wx = if cx == 0 { 1.0 - fx } else { fx };
        for cy in 0..2isize {
            let yi = y0 + cy;
            if yi < 0 || yi >= h as isize {
                continue;
            }
            let wy = if cy == 0 { 1.0 - fy } else { fy };
            for cz in 0..2isize {
                let zi = z0 + cz;
                if zi < 0 || zi >= d as isize {
                    continue;
                }
                let wz = if cz == 0 { 1.0 - fz } else { fz };
                acc += wx * wy * wz * data[(xi as usize, yi as usize, zi as usize)] as f64;
            }
        }
    }
    acc as f32
}

#[inline]
fn sample_nearest(data: &Array3<f32>, j: [f64; 3]) -> f32 {
    let (w, h, d) = data.dim();
    let xi = j[0].round() as isize;
    let yi = j[1].round() as isize;
    let zi = j[2].round() as isize;
    if xi < 0 || yi < 0 || zi < 0 || xi >= w as isize || yi >= h as isize || zi >= d as isize {
        0.0
    } else {
        data[(xi as usize, yi as usize, zi as usize)]
    }
}

fn warp_scalar_field(
    src: &Array3<f32>,
    t: &AffineTransform,
    interp: Interpolation,
) -> Array3<f32> {
    if t.is_identity() {
        return src.clone();
    }
    let (w, h, d) = src.dim();
    let mut out = Array3::<f32>::zeros((w, h, d));
    for x in 0..w {
        let ux = index_to_norm(x as f64, w);
        for y in 0..h {
            let uy = index_to_norm(y as f64, h);
            for z in 0..d {
                let uz = index_to_norm(z as f64, d);
                let v = t.apply([ux, uy, uz]);
                let j = [
                    norm_to_index(v[0], w),
                    norm_to_index(v[1], h),
                    norm_to_index(v[2], d),
                ];
                out[(x, y, z)] = match interp {
                    Interpolation::Trilinear => sample_trilinear(src, j),
                    Interpolation::Nearest => sample_nearest(src, j),
                };
            }
        }
    }
    out
}

/// Resample a volume through `t`: `out(x) = in(t(x))` with zero fill outside
/// the grid.
pub fn warp_volume(
    v: &Volume,
    t: &AffineTransform,
    interp: Interpolation,
) -> Result<Volume, GeomError> {
    check_invertible(t)?;
    Ok(Volume {
        data: warp_scalar_field(&v.data, t, interp),
        spacing: v.spacing,
    })
}

/// Resample a mask. Nearest interpolation keeps a hard mask hard; trilinear
/// produces soft weights in `[0, 1]`.
pub fn warp_mask(
    m: &MaskVolume,
    t: &AffineTransform,
    interp: Interpolation,
) -> Result<MaskVolume, GeomError> {
    check_invertible(t)?;
    Ok(MaskVolume {
        data: warp_scalar_field(&m.data, t, interp),
        hard: m.hard && interp == Interpolation::Nearest,
    })
}

/// Resample every channel of a feature map through the same spatial map.
pub fn warp_feature_map(
    f: &FeatureMap,
    t: &AffineTransform,
    interp: Interpolation,
) -> Result<FeatureMap, GeomError> {
    check_invertible(t)?;
    if t.is_identity() {
        return Ok(f.clone());
    }
    let (c, w, h, d) = f.data.dim();
    let mut out = Array4::<f32>::zeros((c, w, h, d));
    for ch in 0..c {
        let src = f.data.index_axis(ndarray::Axis(0), ch).to_owned();
        let warped = warp_scalar_field(&src, t, interp);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&warped);
    }
    FeatureMap::new(out)
}
