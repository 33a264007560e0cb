//! Prototype machinery: the overlapping 3D window grid, masked average
//! pooling, cosine-softmax matching, and the base-class mask atlas.

use ndarray::{Array3, Array4};

use crate::geom::{FeatureMap, MaskVolume};
use crate::nn::tape::{Window, POOL_EPS};
use crate::phantom::LabeledSubject;

use super::ModelError;

// ---------------------------------------------------------------------------
// Window grid
// ---------------------------------------------------------------------------

/// Overlapping windows of size `round(ratio * extent)` per axis, centre
/// spacing half the window size (floored, at least 1), covering the full
/// extent.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    pub ratios: [f64; 3],
    pub sizes: [usize; 3],
    pub spacing: [usize; 3],
    pub counts: [usize; 3],
    pub windows: Vec<Window>,
}

fn axis_starts(extent: usize, size: usize, spacing: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0usize;
    while s + size <= extent {
        starts.push(s);
        s += spacing;
    }
    let last = extent - size;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

impl WindowGrid {
    pub fn new(shape: [usize; 3], ratios: [f64; 3]) -> Result<Self, ModelError> {
        for (a, &r) in ratios.iter().enumerate() {
            if !(0.0 < r && r <= 1.0) {
                return Err(ModelError::ConfigMismatch(format!(
                    "window ratio {r} on axis {a} outside (0, 1]"
                )));
            }
        }
        let mut sizes = [0usize; 3];
        let mut spacing = [0usize; 3];
        let mut starts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for a in 0..3 {
            let n = shape[a];
            if n == 0 {
                return Err(ModelError::ShapeError("zero-sized axis".into()));
            }
            let w = ((ratios[a] * n as f64).round() as usize).clamp(1, n);
            let s = (w / 2).max(1);
            sizes[a] = w;
            spacing[a] = s;
            starts[a] = axis_starts(n, w, s);
        }
        let counts = [starts[0].len(), starts[1].len(), starts[2].len()];
        let mut windows = Vec::with_capacity(counts[0] * counts[1] * counts[2]);
        for &sx in &starts[0] {
            for &sy in &starts[1] {
                for &sz in &starts[2] {
                    windows.push(Window {
                        start: [sx, sy, sz],
                        size: sizes,
                    });
                }
            }
        }
        Ok(Self {
            ratios,
            sizes,
            spacing,
            counts,
            windows,
        })
    }

    pub fn k(&self) -> usize {
        self.windows.len()
    }
}

// ---------------------------------------------------------------------------
// Prototypes (reference-path ops on plain arrays)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeKind {
    Class,
    Background,
}

/// A pooled feature vector summarizing a class or the background, optionally
/// restricted to one window of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f32>,
    pub kind: PrototypeKind,
    pub window: Option<usize>,
}

/// Mask-weighted average of the feature map over `region` (or the whole
/// grid): `sum(F * M) / sum(M)` per channel.
pub fn masked_average_pool(
    features: &FeatureMap,
    mask: &MaskVolume,
    region: Option<Window>,
    kind: PrototypeKind,
) -> Result<Prototype, ModelError> {
    let sp = features.spatial_shape();
    if mask.shape() != sp {
        return Err(ModelError::ShapeMismatch(format!(
            "mask shape {:?} vs features {:?}",
            mask.shape(),
            sp
        )));
    }
    let win = region.unwrap_or(Window {
        start: [0, 0, 0],
        size: sp,
    });
    let c = features.channels();
    let mut wsum = 0.0f64;
    let mut acc = vec![0.0f64; c];
    for x in win.start[0]..win.start[0] + win.size[0] {
        for y in win.start[1]..win.start[1] + win.size[1] {
            for z in win.start[2]..win.start[2] + win.size[2] {
                let w = mask.data[(x, y, z)] as f64;
                if w != 0.0 {
                    wsum += w;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += features.data[(ch, x, y, z)] as f64 * w;
                    }
                }
            }
        }
    }
    if wsum <= POOL_EPS {
        return Err(ModelError::EmptyMask);
    }
    Ok(Prototype {
        vector: acc.iter().map(|&v| (v / wsum) as f32).collect(),
        kind,
        window: None,
    })
}

/// Pool one prototype per non-empty window of the grid.
pub fn local_prototypes(
    features: &FeatureMap,
    mask: &MaskVolume,
    grid: &WindowGrid,
    kind: PrototypeKind,
) -> Vec<Prototype> {
    let mut out = Vec::new();
    for (k, win) in grid.windows.iter().enumerate() {
        match masked_average_pool(features, mask, Some(*win), kind) {
            Ok(mut p) => {
                p.window = Some(k);
                out.push(p);
            }
            Err(ModelError::EmptyMask) => continue,
            Err(e) => unreachable!("shape checked once: {e}"),
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let eps = crate::nn::tape::NORM_EPS;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += (x as f64) * (x as f64);
        nb += (y as f64) * (y as f64);
    }
    dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
}

/// Two-way softmax over cosine similarities to the class and background
/// prototypes: `exp(s_c) / (exp(s_c) + exp(s_0))`.
pub fn cosine_softmax(feature: &[f32], h_c: &Prototype, h_0: &Prototype) -> f32 {
    let s_c = cosine(feature, &h_c.vector);
    let s_0 = cosine(feature, &h_0.vector);
    // equivalent to sigmoid(s_c - s_0), which is how the tape computes it
    (1.0 / (1.0 + (s_0 - s_c).exp())) as f32
}

/// Voxelwise `cosine_softmax` against a single (global) prototype pair.
pub fn predict_query_mask_global(
    features: &FeatureMap,
    h_c: &Prototype,
    h_0: &Prototype,
) -> MaskVolume {
    let sp = features.spatial_shape();
    let c = features.channels();
    let mut out = Array3::<f32>::zeros((sp[0], sp[1], sp[2]));
    let mut fv = vec![0.0f32; c];
    for x in 0..sp[0] {
        for y in 0..sp[1] {
            for z in 0..sp[2] {
                for (ch, f) in fv.iter_mut().enumerate() {
                    *f = features.data[(ch, x, y, z)];
                }
                out[(x, y, z)] = cosine_softmax(&fv, h_c, h_0);
            }
        }
    }
    MaskVolume { data: out, hard: false }
}

/// Local-prototype prediction: per voxel the class and background scores are
/// maxima of the cosine similarity over the surviving window prototypes.
pub fn predict_query_mask_local(
    features: &FeatureMap,
    class_protos: &[Prototype],
    background_protos: &[Prototype],
) -> Result<MaskVolume, ModelError> {
    if class_protos.is_empty() {
        return Err(ModelError::NoValidPrototype("class"));
    }
    if background_protos.is_empty() {
        return Err(ModelError::NoValidPrototype("background"));
    }
    let sp = features.spatial_shape();
    let c = features.channels();
    let mut out = Array3::<f32>::zeros((sp[0], sp[1], sp[2]));
    let mut fv = vec![0.0f32; c];
    for x in 0..sp[0] {
        for y in 0..sp[1] {
            for z in 0..sp[2] {
                for (ch, f) in fv.iter_mut().enumerate() {
                    *f = features.data[(ch, x, y, z)];
                }
                let s_c = class_protos
                    .iter()
                    .map(|p| cosine(&fv, &p.vector))
                    .fold(f64::NEG_INFINITY, f64::max);
                let s_0 = background_protos
                    .iter()
                    .map(|p| cosine(&fv, &p.vector))
                    .fold(f64::NEG_INFINITY, f64::max);
                out[(x, y, z)] = (1.0 / (1.0 + (s_0 - s_c).exp())) as f32;
            }
        }
    }
    Ok(MaskVolume { data: out, hard: false })
}

// ---------------------------------------------------------------------------
// Atlas
// ---------------------------------------------------------------------------

/// Voxelwise average of one-hot (background + base classes) masks over a set
/// of subjects; channel 0 is background and channels sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    /// Shape `(num_base_classes + 1, W, H, D)`.
    pub data: Array4<f32>,
    pub classes: Vec<String>,
}

pub fn build_atlas(subjects: &[&LabeledSubject], base_classes: &[String]) -> Result<Atlas, ModelError> {
    if subjects.is_empty() {
        return Err(ModelError::ShapeMismatch("no subjects to average".into()));
    }
    let shape = subjects[0].shape();
    for s in subjects {
        if s.shape() != shape {
            return Err(ModelError::ShapeMismatch(format!(
                "subject {} shape {:?} differs from {:?}",
                s.id,
                s.shape(),
                shape
            )));
        }
    }
    let nc = base_classes.len();
    let mut data = Array4::<f32>::zeros((nc + 1, shape[0], shape[1], shape[2]));
    let inv = 1.0f32 / subjects.len() as f32;
    for s in subjects {
        // map label values to base-class channel (novel classes count as
        // background here)
        let mut label_to_channel = vec![0usize; s.classes.len() + 1];
        for (bi, bc) in base_classes.iter().enumerate() {
            if let Some(ci) = s.classes.iter().position(|c| c == bc) {
                label_to_channel[ci + 1] = bi + 1;
            }
        }
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let l = s.labels[(x, y, z)] as usize;
                    let ch = label_to_channel[l];
                    data[(ch, x, y, z)] += inv;
                }
            }
        }
    }
    Ok(Atlas {
        data,
        classes: base_classes.to_vec(),
    })
}
