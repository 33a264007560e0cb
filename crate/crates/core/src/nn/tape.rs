//! Tape-based reverse-mode autodiff.
//!
//! A [`Tape`] owns a DAG of nodes; each op records the metadata its backward
//! pass needs. `backward` walks the tape in reverse and returns one gradient
//! slot per node (filled for every node on a path to the root).
//!
//! Convolutions run as one gemm per kernel offset over the zero-padded
//! volume, exploiting the fact that a spatial shift is a constant offset in
//! the padded flat index space; columns that land in the padding compute
//! garbage and are discarded when the core is extracted.

use ndarray::{ArrayD, IxDyn};

use super::Real;

pub type NodeId = usize;

/// Weight-sum threshold below which a pooling window is dropped.
pub const POOL_EPS: f64 = 1e-6;
/// Norm clamp for cosine similarity.
pub const NORM_EPS: f64 = 1e-8;
/// Voxel block length for cache-blocked sweeps over channel-major tensors.
const VOXEL_BLOCK: usize = 2048;

/// Transpose `(C, N)` channel-major data into voxel-major `(N, C)`,
/// blocked so the strided side stays cache resident.
fn transpose_cn<R: Real>(xs: &[R], c: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(xs.len(), c * n);
    debug_assert_eq!(out.len(), n * c);
    for v0 in (0..n).step_by(VOXEL_BLOCK) {
        let v1 = (v0 + VOXEL_BLOCK).min(n);
        for ch in 0..c {
            let row = &xs[ch * n + v0..ch * n + v1];
            for (i, &x) in row.iter().enumerate() {
                out[(v0 + i) * c + ch] = x;
            }
        }
    }
}

/// Accumulate voxel-major `(N, C)` data back into channel-major `(C, N)`.
fn add_nc_to_cn<R: Real>(src: &[R], c: usize, n: usize, out: &mut [R]) {
    for v0 in (0..n).step_by(VOXEL_BLOCK) {
        let v1 = (v0 + VOXEL_BLOCK).min(n);
        for ch in 0..c {
            let orow = &mut out[ch * n + v0..ch * n + v1];
            for (i, o) in orow.iter_mut().enumerate() {
                *o += src[(v0 + i) * c + ch];
            }
        }
    }
}

/// Axis-aligned box over the spatial grid: `start .. start + size` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

struct Node<R: Real> {
    value: ArrayD<R>,
    op: Op<R>,
}

enum Op<R: Real> {
    Leaf,
    Conv3 { x: NodeId, w: NodeId, b: NodeId },
    Conv1 { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<R>,
        inv_std: Vec<R>,
    },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: R },
    SoftmaxCh { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    GlobalMean { x: NodeId },
    WarpAffine { x: NodeId, params: NodeId },
    WindowPool {
        f: NodeId,
        wts: NodeId,
        kept: Vec<Window>,
        sums: Vec<R>,
    },
    CosineMax {
        f: NodeId,
        protos: NodeId,
        argmax: Vec<u32>,
        /// Voxel-major normalized features `(N, C)`, reused in backward.
        fhat_t: Vec<R>,
        fnorm: Vec<R>,
    },
    Dice {
        pred: NodeId,
        target: NodeId,
        num: R,
        den: R,
    },
    McDiceFg {
        pred: NodeId,
        target: ArrayD<R>,
        nums: Vec<R>,
        dens: Vec<R>,
    },
}

/// Split a tensor's dims into `(channels, [w, h, d])`, collapsing leading
/// axes into the channel count. A 3-d tensor is a single channel.
fn channel_spatial(shape: &[usize]) -> (usize, [usize; 3]) {
    assert!(shape.len() >= 3, "expected >= 3 dims, got {:?}", shape);
    let n = shape.len();
    let sp = [shape[n - 3], shape[n - 2], shape[n - 1]];
    let c: usize = shape[..n - 3].iter().product();
    (c.max(1), sp)
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<R> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: ArrayD<R>, op: Op<R>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<R>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // -- elementwise ------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(R::zero()));
        self.push(v, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.tanh());
        self.push(v, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = R::one();
        let v = self.nodes[x].value.mapv(|a| one / (one + (-a).exp()));
        self.push(v, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: R) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * c);
        self.push(v, Op::Scale { x, c })
    }

    // -- convolutions ------------------------------------------------------

    /// 3x3x3 convolution, stride 1, zero padding 1.
    /// `x: (Cin, W, H, D)`, `w: (Cout, Cin, 3, 3, 3)`, `b: (Cout)`.
    pub fn conv3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let (cin, sp) = channel_spatial(xv.shape());
        let wsh = wv.shape();
        assert_eq!(wsh, &[wsh[0], cin, 3, 3, 3]);
        let cout = wsh[0];
        assert_eq!(bv.len(), cout);

        let xp = pad1(xv.as_slice().unwrap(), cin, sp);
        let npad = padded_len(sp);
        let mut yp = vec![R::zero(); cout * npad];
        conv3_im2col_forward(cout, cin, sp, wv.as_slice().unwrap(), &xp, &mut yp);
        let mut out = ArrayD::<R>::zeros(IxDyn(&[cout, sp[0], sp[1], sp[2]]));
        extract_core(&yp, cout, sp, out.as_slice_mut().unwrap());
        {
            let bs = bv.as_slice().unwrap();
            let n = sp[0] * sp[1] * sp[2];
            let os = out.as_slice_mut().unwrap();
            for (o, &bias) in bs.iter().enumerate() {
                for v in &mut os[o * n..(o + 1) * n] {
                    *v += bias;
                }
            }
        }
        self.push(out, Op::Conv3 { x, w, b })
    }

    /// Pointwise 1x1x1 convolution. `w: (Cout, Cin)`, `b: (Cout)`.
    pub fn conv1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let (cin, sp) = channel_spatial(xv.shape());
        assert_eq!(wv.shape()[1], cin);
        let cout = wv.shape()[0];
        let n = sp[0] * sp[1] * sp[2];
        let mut out = ArrayD::<R>::zeros(IxDyn(&[cout, sp[0], sp[1], sp[2]]));
        unsafe {
            R::gemm(
                cout,
                cin,
                n,
                R::one(),
                wv.as_slice().unwrap().as_ptr(),
                cin as isize,
                1,
                xv.as_slice().unwrap().as_ptr(),
                n as isize,
                1,
                R::zero(),
                out.as_slice_mut().unwrap().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        {
            let bs = bv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for (o, &bias) in bs.iter().enumerate() {
                for v in &mut os[o * n..(o + 1) * n] {
                    *v += bias;
                }
            }
        }
        self.push(out, Op::Conv1 { x, w, b })
    }

    // -- resolution changes -----------------------------------------------

    /// 2x2x2 average pooling with stride 2. All spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, sp) = channel_spatial(xv.shape());
        assert!(
            sp.iter().all(|&s| s % 2 == 0),
            "avg_pool2 needs even spatial dims, got {:?}",
            sp
        );
        let (ow, oh, od) = (sp[0] / 2, sp[1] / 2, sp[2] / 2);
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<R>::zeros(IxDyn(&[c, ow, oh, od]));
        let eighth = R::from_f64(0.125);
        {
            let os = out.as_slice_mut().unwrap();
            let (h, d) = (sp[1], sp[2]);
            for ch in 0..c {
                for x0 in 0..ow {
                    for y0 in 0..oh {
                        for z0 in 0..od {
                            let mut s = R::zero();
                            for dx in 0..2 {
                                for dy in 0..2 {
                                    let base =
                                        ((ch * sp[0] + 2 * x0 + dx) * h + 2 * y0 + dy) * d + 2 * z0;
                                    s += xs[base] + xs[base + 1];
                                }
                            }
                            os[((ch * ow + x0) * oh + y0) * od + z0] = s * eighth;
                        }
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2 { x })
    }

    /// Trilinear 2x upsampling with half-pixel alignment and edge clamping.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, sp) = channel_spatial(xv.shape());
        let osp = [sp[0] * 2, sp[1] * 2, sp[2] * 2];
        let tabs: Vec<UpsampleTable<R>> = (0..3).map(|a| UpsampleTable::new(sp[a])).collect();
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<R>::zeros(IxDyn(&[c, osp[0], osp[1], osp[2]]));
        {
            let os = out.as_slice_mut().unwrap();
            let (h, d) = (sp[1], sp[2]);
            let (oh, od) = (osp[1], osp[2]);
            for ch in 0..c {
                let src = &xs[ch * sp[0] * h * d..(ch + 1) * sp[0] * h * d];
                let dst = &mut os[ch * osp[0] * oh * od..(ch + 1) * osp[0] * oh * od];
                for ox in 0..osp[0] {
                    let (x0, x1, wx0, wx1) = tabs[0].at(ox);
                    for oy in 0..osp[1] {
                        let (y0, y1, wy0, wy1) = tabs[1].at(oy);
                        for oz in 0..osp[2] {
                            let (z0, z1, wz0, wz1) = tabs[2].at(oz);
                            let mut acc = R::zero();
                            for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                                for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                                    let base = (xi * h + yi) * d;
                                    acc += wx * wy * (wz0 * src[base + z0] + wz1 * src[base + z1]);
                                }
                            }
                            dst[(ox * oh + oy) * od + oz] = acc;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Upsample2 { x })
    }

    // -- normalization & heads ----------------------------------------------

    /// Per-channel normalization over the spatial extent with affine params
    /// `gamma`, `beta` of shape `(C)`.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, sp) = channel_spatial(xv.shape());
        let n = sp[0] * sp[1] * sp[2];
        let xs = xv.as_slice().unwrap();
        let gs = self.nodes[gamma].value.as_slice().unwrap();
        let bs = self.nodes[beta].value.as_slice().unwrap();
        let eps = R::from_f64(1e-5);
        let inv_n = R::one() / R::from_f64(n as f64);
        let mut mean = vec![R::zero(); c];
        let mut inv_std = vec![R::zero(); c];
        let mut out = ArrayD::<R>::zeros(xv.raw_dim());
        {
            let os = out.as_slice_mut().unwrap();
            for ch in 0..c {
                let xs_c = &xs[ch * n..(ch + 1) * n];
                let mu = xs_c.iter().copied().sum::<R>() * inv_n;
                let var = xs_c
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<R>()
                    * inv_n;
                let is = R::one() / (var + eps).sqrt();
                mean[ch] = mu;
                inv_std[ch] = is;
                let (g, b) = (gs[ch], bs[ch]);
                for (o, &v) in os[ch * n..(ch + 1) * n].iter_mut().zip(xs_c) {
                    *o = g * (v - mu) * is + b;
                }
            }
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Softmax over the channel axis (axis 0) of a `(C, W, H, D)` tensor.
    /// Sweeps voxel blocks so all channel rows of a block stay cache
    /// resident.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, sp) = channel_spatial(xv.shape());
        let n = sp[0] * sp[1] * sp[2];
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<R>::zeros(xv.raw_dim());
        {
            let os = out.as_slice_mut().unwrap();
            let mut z = vec![R::zero(); VOXEL_BLOCK];
            let mut mx = vec![R::zero(); VOXEL_BLOCK];
            for v0 in (0..n).step_by(VOXEL_BLOCK) {
                let v1 = (v0 + VOXEL_BLOCK).min(n);
                let b = v1 - v0;
                mx[..b].copy_from_slice(&xs[v0..v1]);
                for ch in 1..c {
                    let row = &xs[ch * n + v0..ch * n + v1];
                    for (m, &xv) in mx[..b].iter_mut().zip(row) {
                        *m = m.max(xv);
                    }
                }
                for zv in &mut z[..b] {
                    *zv = R::zero();
                }
                for ch in 0..c {
                    let row = &xs[ch * n + v0..ch * n + v1];
                    let orow = &mut os[ch * n + v0..ch * n + v1];
                    for i in 0..b {
                        let e = (row[i] - mx[i]).exp();
                        orow[i] = e;
                        z[i] += e;
                    }
                }
                for zv in &mut z[..b] {
                    *zv = R::one() / *zv;
                }
                for ch in 0..c {
                    let orow = &mut os[ch * n + v0..ch * n + v1];
                    for i in 0..b {
                        orow[i] *= z[i];
                    }
                }
            }
        }
        self.push(out, Op::SoftmaxCh { x })
    }

    /// Dense layer on a 1-d input: `y = W x + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.nodes[x].value.as_slice().unwrap();
        let wv = &self.nodes[w].value;
        let bs = self.nodes[b].value.as_slice().unwrap();
        let (no, ni) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xs.len(), ni);
        let ws = wv.as_slice().unwrap();
        let mut y = vec![R::zero(); no];
        for o in 0..no {
            let mut acc = bs[o];
            for i in 0..ni {
                acc += ws[o * ni + i] * xs[i];
            }
            y[o] = acc;
        }
        self.push(ArrayD::from_shape_vec(IxDyn(&[no]), y).unwrap(), Op::Linear { x, w, b })
    }

    /// Mean over the spatial extent: `(C, W, H, D) -> (C)`.
    pub fn global_mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, sp) = channel_spatial(xv.shape());
        let n = sp[0] * sp[1] * sp[2];
        let inv_n = R::one() / R::from_f64(n as f64);
        let xs = xv.as_slice().unwrap();
        let mut y = vec![R::zero(); c];
        for ch in 0..c {
            y[ch] = xs[ch * n..(ch + 1) * n].iter().copied().sum::<R>() * inv_n;
        }
        self.push(ArrayD::from_shape_vec(IxDyn(&[c]), y).unwrap(), Op::GlobalMean { x })
    }

    // -- spatial transform --------------------------------------------------

    /// Backward-warp `x` through the affine map held in `params`
    /// (12 values: row-major 3x3 linear part then translation, acting on
    /// normalized coordinates). Trilinear sampling, zero outside the grid.
    ///
    /// When `params` is exactly the identity the value passes through
    /// bit-for-bit; gradients w.r.t. `params` are still the one-sided
    /// sampling derivatives, so an identity-initialized transform head
    /// receives a training signal.
    pub fn warp_affine(&mut self, x: NodeId, params: NodeId) -> NodeId {
        let pv = self.nodes[params].value.as_slice().unwrap();
        assert_eq!(pv.len(), 12);
        let xv = &self.nodes[x].value;
        let value = if is_identity_params(pv) {
            xv.clone()
        } else {
            let (c, sp) = channel_spatial(xv.shape());
            let mut out = ArrayD::<R>::zeros(xv.raw_dim());
            warp_forward(
                xv.as_slice().unwrap(),
                c,
                sp,
                pv,
                out.as_slice_mut().unwrap(),
            );
            out
        };
        self.push(value, Op::WarpAffine { x, params })
    }

    // -- prototypes ---------------------------------------------------------

    /// Weighted average pooling of `f: (C, W, H, D)` over each window of
    /// `wts: (W, H, D)`. Windows whose weight sum is `<= POOL_EPS` are
    /// dropped. Returns the `(K_kept, C)` prototype node and the indices of
    /// the kept windows, or `None` when every window is empty.
    pub fn window_pool(
        &mut self,
        f: NodeId,
        wts: NodeId,
        windows: &[Window],
    ) -> Option<(NodeId, Vec<usize>)> {
        let fv = &self.nodes[f].value;
        let wv = &self.nodes[wts].value;
        let (c, sp) = channel_spatial(fv.shape());
        let (wc, wsp) = channel_spatial(wv.shape());
        assert_eq!(wc, 1, "weights must be single-channel");
        assert_eq!(sp, wsp);
        let n = sp[0] * sp[1] * sp[2];
        let fs = fv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let eps = R::from_f64(POOL_EPS);
        let mut f_t = vec![R::zero(); n * c];
        transpose_cn(fs, c, n, &mut f_t);

        let mut kept = Vec::new();
        let mut kept_idx = Vec::new();
        let mut sums = Vec::new();
        let mut rows: Vec<R> = Vec::new();
        for (wi, win) in windows.iter().enumerate() {
            let mut s = R::zero();
            for_window_voxels(win, sp, |v| s += ws[v]);
            if s.to_f64() <= eps.to_f64() {
                continue;
            }
            let inv = R::one() / s;
            let mut proto = vec![R::zero(); c];
            for_window_voxels(win, sp, |v| {
                let wt = ws[v];
                if wt != R::zero() {
                    let frow = &f_t[v * c..(v + 1) * c];
                    for (p, &fx) in proto.iter_mut().zip(frow) {
                        *p += fx * wt;
                    }
                }
            });
            for p in &mut proto {
                *p *= inv;
            }
            rows.extend_from_slice(&proto);
            kept.push(*win);
            kept_idx.push(wi);
            sums.push(s);
        }
        if kept.is_empty() {
            return None;
        }
        let k = kept.len();
        let value = ArrayD::from_shape_vec(IxDyn(&[k, c]), rows).unwrap();
        let id = self.push(value, Op::WindowPool { f, wts, kept, sums });
        Some((id, kept_idx))
    }

    /// Per-voxel maximum cosine similarity between feature vectors of
    /// `f: (C, W, H, D)` and prototype rows of `protos: (K, C)`.
    /// Norms are clamped at [`NORM_EPS`].
    pub fn cosine_max(&mut self, f: NodeId, protos: NodeId) -> NodeId {
        let fv = &self.nodes[f].value;
        let pv = &self.nodes[protos].value;
        let (c, sp) = channel_spatial(fv.shape());
        assert_eq!(pv.shape()[1], c);
        let k = pv.shape()[0];
        let n = sp[0] * sp[1] * sp[2];
        let fs = fv.as_slice().unwrap();
        let ps = pv.as_slice().unwrap();
        let eps = R::from_f64(NORM_EPS);

        // Voxel-major normalized features; one transposed pass, then all work
        // is contiguous and a single gemm yields cosines directly.
        let mut fhat_t = vec![R::zero(); n * c];
        transpose_cn(fs, c, n, &mut fhat_t);
        let mut fnorm = vec![R::zero(); n];
        for (v, nr) in fnorm.iter_mut().enumerate() {
            let row = &mut fhat_t[v * c..(v + 1) * c];
            let nrm = row.iter().map(|&a| a * a).sum::<R>().sqrt().max(eps);
            let inv = R::one() / nrm;
            for a in row.iter_mut() {
                *a *= inv;
            }
            *nr = nrm;
        }
        let mut phat = ps.to_vec();
        for ki in 0..k {
            let row = &mut phat[ki * c..(ki + 1) * c];
            let nrm = row.iter().map(|&a| a * a).sum::<R>().sqrt().max(eps);
            let inv = R::one() / nrm;
            for a in row {
                *a *= inv;
            }
        }
        // sims: (N, K) = fhat (N, C) x phat^T (C, K)
        let mut sims = vec![R::zero(); n * k];
        unsafe {
            R::gemm(
                n,
                c,
                k,
                R::one(),
                fhat_t.as_ptr(),
                c as isize,
                1,
                phat.as_ptr(),
                1,
                c as isize,
                R::zero(),
                sims.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut out = vec![R::zero(); n];
        let mut argmax = vec![0u32; n];
        for v in 0..n {
            let row = &sims[v * k..(v + 1) * k];
            let mut best = row[0];
            let mut best_k = 0u32;
            for (ki, &s) in row.iter().enumerate().skip(1) {
                if s > best {
                    best = s;
                    best_k = ki as u32;
                }
            }
            out[v] = best;
            argmax[v] = best_k;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[sp[0], sp[1], sp[2]]), out).unwrap();
        self.push(
            value,
            Op::CosineMax {
                f,
                protos,
                argmax,
                fhat_t,
                fnorm,
            },
        )
    }

    // -- losses ---------------------------------------------------------------

    /// Soft Dice loss `1 - (2 sum(p t) + d) / (sum p + sum t + d)`, d = 1e-5.
    /// Differentiable in both arguments.
    pub fn dice_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let p = &self.nodes[pred].value;
        let t = &self.nodes[target].value;
        assert_eq!(p.shape(), t.shape(), "dice loss shape mismatch");
        let delta = R::from_f64(1e-5);
        let mut inter = R::zero();
        let mut psum = R::zero();
        let mut tsum = R::zero();
        for (&a, &b) in p.iter().zip(t.iter()) {
            inter += a * b;
            psum += a;
            tsum += b;
        }
        let num = R::from_f64(2.0) * inter + delta;
        let den = psum + tsum + delta;
        let loss = R::one() - num / den;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Dice {
                pred,
                target,
                num,
                den,
            },
        )
    }

    /// Mean Dice loss over foreground channels (channel 0 is background and
    /// is excluded) against a constant multi-channel target.
    pub fn multiclass_dice_fg(&mut self, pred: NodeId, target: ArrayD<R>) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.shape(), target.shape());
        let (c, sp) = channel_spatial(p.shape());
        assert!(c >= 2, "need at least one foreground channel");
        let n = sp[0] * sp[1] * sp[2];
        let ps = p.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let delta = R::from_f64(1e-5);
        let mut nums = vec![R::zero(); c];
        let mut dens = vec![R::zero(); c];
        let mut total = R::zero();
        for ch in 1..c {
            let mut inter = R::zero();
            let mut psum = R::zero();
            let mut tsum = R::zero();
            for v in 0..n {
                let a = ps[ch * n + v];
                let b = ts[ch * n + v];
                inter += a * b;
                psum += a;
                tsum += b;
            }
            nums[ch] = R::from_f64(2.0) * inter + delta;
            dens[ch] = psum + tsum + delta;
            total += R::one() - nums[ch] / dens[ch];
        }
        let value = total / R::from_f64((c - 1) as f64);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::McDiceFg {
                pred,
                target,
                nums,
                dens,
            },
        )
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse sweep from `root` (a scalar node). Returns one gradient slot
    /// per node id; slots off the path stay `None`.
    pub fn backward(&self, root: NodeId) -> Vec<Option<ArrayD<R>>> {
        let mut grads: Vec<Option<ArrayD<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), R::one()));
        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_one(id, &g, &mut grads);
        }
        grads
    }

    fn backprop_one(&self, id: NodeId, g: &ArrayD<R>, grads: &mut Vec<Option<ArrayD<R>>>) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let mut d = g.clone();
                d.zip_mut_with(xv, |gi, &xi| {
                    if xi <= R::zero() {
                        *gi = R::zero();
                    }
                });
                acc(grads, *x, d);
            }
            Op::Tanh { x } => {
                let yv = &self.nodes[id].value;
                let mut d = g.clone();
                d.zip_mut_with(yv, |gi, &yi| *gi = *gi * (R::one() - yi * yi));
                acc(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[id].value;
                let mut d = g.clone();
                d.zip_mut_with(yv, |gi, &yi| *gi = *gi * yi * (R::one() - yi));
                acc(grads, *x, d);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Scale { x, c } => {
                acc(grads, *x, g.mapv(|v| v * *c));
            }
            Op::Conv3 { x, w, b } => self.backprop_conv3(*x, *w, *b, g, grads),
            Op::Conv1 { x, w, b } => self.backprop_conv1(*x, *w, *b, g, grads),
            Op::AvgPool2 { x } => {
                let xv = &self.nodes[*x].value;
                let (c, sp) = channel_spatial(xv.shape());
                let (ow, oh, od) = (sp[0] / 2, sp[1] / 2, sp[2] / 2);
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
                let eighth = R::from_f64(0.125);
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        for x0 in 0..ow {
                            for y0 in 0..oh {
                                for z0 in 0..od {
                                    let gv = gs[((ch * ow + x0) * oh + y0) * od + z0] * eighth;
                                    for dxo in 0..2 {
                                        for dyo in 0..2 {
                                            let base = ((ch * sp[0] + 2 * x0 + dxo) * sp[1]
                                                + 2 * y0
                                                + dyo)
                                                * sp[2]
                                                + 2 * z0;
                                            ds[base] += gv;
                                            ds[base + 1] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let xv = &self.nodes[*x].value;
                let (c, sp) = channel_spatial(xv.shape());
                let osp = [sp[0] * 2, sp[1] * 2, sp[2] * 2];
                let tabs: Vec<UpsampleTable<R>> =
                    (0..3).map(|a| UpsampleTable::new(sp[a])).collect();
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let (h, d) = (sp[1], sp[2]);
                    let (oh, od) = (osp[1], osp[2]);
                    for ch in 0..c {
                        let gsrc = &gs[ch * osp[0] * oh * od..(ch + 1) * osp[0] * oh * od];
                        let dst = &mut ds[ch * sp[0] * h * d..(ch + 1) * sp[0] * h * d];
                        for ox in 0..osp[0] {
                            let (x0, x1, wx0, wx1) = tabs[0].at(ox);
                            for oy in 0..osp[1] {
                                let (y0, y1, wy0, wy1) = tabs[1].at(oy);
                                for oz in 0..osp[2] {
                                    let (z0, z1, wz0, wz1) = tabs[2].at(oz);
                                    let gv = gsrc[(ox * oh + oy) * od + oz];
                                    for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                                        for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                                            let base = (xi * h + yi) * d;
                                            dst[base + z0] += gv * wx * wy * wz0;
                                            dst[base + z1] += gv * wx * wy * wz1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = &self.nodes[*x].value;
                let (c, sp) = channel_spatial(xv.shape());
                let n = sp[0] * sp[1] * sp[2];
                let inv_n = R::one() / R::from_f64(n as f64);
                let xs = xv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let gam = self.nodes[*gamma].value.as_slice().unwrap();
                let mut dgamma = vec![R::zero(); c];
                let mut dbeta = vec![R::zero(); c];
                let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let xs_c = &xs[ch * n..(ch + 1) * n];
                        let gs_c = &gs[ch * n..(ch + 1) * n];
                        let mut sum_g = R::zero();
                        let mut sum_gx = R::zero();
                        for v in 0..n {
                            let xhat = (xs_c[v] - mu) * is;
                            sum_g += gs_c[v];
                            sum_gx += gs_c[v] * xhat;
                        }
                        dbeta[ch] = sum_g;
                        dgamma[ch] = sum_gx;
                        let m_g = sum_g * inv_n;
                        let m_gx = sum_gx * inv_n;
                        let gch = gam[ch];
                        for v in 0..n {
                            let xhat = (xs_c[v] - mu) * is;
                            ds[ch * n + v] = gch * is * (gs_c[v] - m_g - xhat * m_gx);
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(
                    grads,
                    *gamma,
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                );
                acc(
                    grads,
                    *beta,
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                );
            }
            Op::SoftmaxCh { x } => {
                let yv = &self.nodes[id].value;
                let (c, sp) = channel_spatial(yv.shape());
                let n = sp[0] * sp[1] * sp[2];
                let ys = yv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<R>::zeros(yv.raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let mut dot = vec![R::zero(); VOXEL_BLOCK];
                    for v0 in (0..n).step_by(VOXEL_BLOCK) {
                        let v1 = (v0 + VOXEL_BLOCK).min(n);
                        let b = v1 - v0;
                        for dv in &mut dot[..b] {
                            *dv = R::zero();
                        }
                        for ch in 0..c {
                            let yr = &ys[ch * n + v0..ch * n + v1];
                            let gr = &gs[ch * n + v0..ch * n + v1];
                            for i in 0..b {
                                dot[i] += gr[i] * yr[i];
                            }
                        }
                        for ch in 0..c {
                            let yr = &ys[ch * n + v0..ch * n + v1];
                            let gr = &gs[ch * n + v0..ch * n + v1];
                            let dr = &mut ds[ch * n + v0..ch * n + v1];
                            for i in 0..b {
                                dr[i] = yr[i] * (gr[i] - dot[i]);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.as_slice().unwrap();
                let wv = &self.nodes[*w].value;
                let (no, ni) = (wv.shape()[0], wv.shape()[1]);
                let ws = wv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dw = vec![R::zero(); no * ni];
                let mut dx = vec![R::zero(); ni];
                for o in 0..no {
                    for i in 0..ni {
                        dw[o * ni + i] = gs[o] * xs[i];
                        dx[i] += ws[o * ni + i] * gs[o];
                    }
                }
                acc(grads, *x, ArrayD::from_shape_vec(IxDyn(&[ni]), dx).unwrap());
                acc(
                    grads,
                    *w,
                    ArrayD::from_shape_vec(IxDyn(&[no, ni]), dw).unwrap(),
                );
                acc(grads, *b, g.clone());
            }
            Op::GlobalMean { x } => {
                let xv = &self.nodes[*x].value;
                let (c, sp) = channel_spatial(xv.shape());
                let n = sp[0] * sp[1] * sp[2];
                let inv_n = R::one() / R::from_f64(n as f64);
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let gv = gs[ch] * inv_n;
                        for v in &mut ds[ch * n..(ch + 1) * n] {
                            *v = gv;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::WarpAffine { x, params } => {
                let xv = &self.nodes[*x].value;
                let pv = self.nodes[*params].value.as_slice().unwrap();
                let (c, sp) = channel_spatial(xv.shape());
                let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
                let mut dp = vec![R::zero(); 12];
                warp_backward(
                    xv.as_slice().unwrap(),
                    c,
                    sp,
                    pv,
                    g.as_slice().unwrap(),
                    dx.as_slice_mut().unwrap(),
                    &mut dp,
                );
                acc(grads, *x, dx);
                acc(
                    grads,
                    *params,
                    ArrayD::from_shape_vec(IxDyn(&[12]), dp).unwrap(),
                );
            }
            Op::WindowPool { f, wts, kept, sums } => {
                let fv = &self.nodes[*f].value;
                let wv = &self.nodes[*wts].value;
                let protos = &self.nodes[id].value;
                let (c, sp) = channel_spatial(fv.shape());
                let n = sp[0] * sp[1] * sp[2];
                let fs = fv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let ps = protos.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut f_t = vec![R::zero(); n * c];
                transpose_cn(fs, c, n, &mut f_t);
                let mut df_t = vec![R::zero(); n * c];
                let mut dw = ArrayD::<R>::zeros(wv.raw_dim());
                {
                    let dws = dw.as_slice_mut().unwrap();
                    for (ki, win) in kept.iter().enumerate() {
                        let inv_s = R::one() / sums[ki];
                        let grow = &gs[ki * c..(ki + 1) * c];
                        let prow = &ps[ki * c..(ki + 1) * c];
                        for_window_voxels(win, sp, |v| {
                            let wt = ws[v] * inv_s;
                            let frow = &f_t[v * c..(v + 1) * c];
                            let drow = &mut df_t[v * c..(v + 1) * c];
                            let mut dot = R::zero();
                            for ch in 0..c {
                                dot += grow[ch] * (frow[ch] - prow[ch]);
                                drow[ch] += grow[ch] * wt;
                            }
                            dws[v] += dot * inv_s;
                        });
                    }
                }
                let mut df = ArrayD::<R>::zeros(fv.raw_dim());
                add_nc_to_cn(&df_t, c, n, df.as_slice_mut().unwrap());
                acc(grads, *f, df);
                acc(grads, *wts, dw);
            }
            Op::CosineMax {
                f,
                protos,
                argmax,
                fhat_t,
                fnorm,
            } => {
                let fv = &self.nodes[*f].value;
                let pv = &self.nodes[*protos].value;
                let sv = self.nodes[id].value.as_slice().unwrap();
                let (c, sp) = channel_spatial(fv.shape());
                let k = pv.shape()[0];
                let n = sp[0] * sp[1] * sp[2];
                let ps = pv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let eps = R::from_f64(NORM_EPS);
                let mut phat = ps.to_vec();
                let mut pnorm = vec![R::zero(); k];
                for ki in 0..k {
                    let row = &mut phat[ki * c..(ki + 1) * c];
                    let nrm = row.iter().map(|&a| a * a).sum::<R>().sqrt().max(eps);
                    let inv = R::one() / nrm;
                    for a in row.iter_mut() {
                        *a *= inv;
                    }
                    pnorm[ki] = nrm;
                }
                // d cos/d f = (hhat - s * fhat) / |f|, and symmetrically for
                // the prototype. A clamped (near-zero) norm would blow the
                // 1/|.| factor up to 1/eps, so those voxels contribute no
                // gradient at all.
                let mut df_t = vec![R::zero(); n * c];
                let mut dp = ArrayD::<R>::zeros(pv.raw_dim());
                {
                    let dps = dp.as_slice_mut().unwrap();
                    for v in 0..n {
                        let gv = gs[v];
                        if gv == R::zero() {
                            continue;
                        }
                        let ki = argmax[v] as usize;
                        let s = sv[v];
                        let nf = fnorm[v];
                        let nh = pnorm[ki];
                        if nf <= eps || nh <= eps {
                            continue;
                        }
                        let gf = gv / nf;
                        let gh = gv / nh;
                        let frow = &fhat_t[v * c..(v + 1) * c];
                        let hrow = &phat[ki * c..(ki + 1) * c];
                        let drow = &mut df_t[v * c..(v + 1) * c];
                        let prow = &mut dps[ki * c..(ki + 1) * c];
                        for ch in 0..c {
                            drow[ch] += gf * (hrow[ch] - s * frow[ch]);
                            prow[ch] += gh * (frow[ch] - s * hrow[ch]);
                        }
                    }
                }
                let mut df = ArrayD::<R>::zeros(fv.raw_dim());
                add_nc_to_cn(&df_t, c, n, df.as_slice_mut().unwrap());
                acc(grads, *f, df);
                acc(grads, *protos, dp);
            }
            Op::Dice {
                pred,
                target,
                num,
                den,
            } => {
                let g0 = *g.iter().next().unwrap();
                let p = &self.nodes[*pred].value;
                let t = &self.nodes[*target].value;
                let two = R::from_f64(2.0);
                let inv_den = R::one() / *den;
                let ratio = *num * inv_den * inv_den;
                // d(loss)/dp_i = -(2 t_i / den - num/den^2)
                let dp = t.mapv(|ti| -g0 * (two * ti * inv_den - ratio));
                let dt = p.mapv(|pi| -g0 * (two * pi * inv_den - ratio));
                acc(grads, *pred, dp);
                acc(grads, *target, dt);
            }
            Op::McDiceFg {
                pred,
                target,
                nums,
                dens,
            } => {
                let g0 = *g.iter().next().unwrap();
                let p = &self.nodes[*pred].value;
                let (c, sp) = channel_spatial(p.shape());
                let n = sp[0] * sp[1] * sp[2];
                let ts = target.as_slice().unwrap();
                let two = R::from_f64(2.0);
                let scale = g0 / R::from_f64((c - 1) as f64);
                let mut dp = ArrayD::<R>::zeros(p.raw_dim());
                {
                    let ds = dp.as_slice_mut().unwrap();
                    for ch in 1..c {
                        let inv_den = R::one() / dens[ch];
                        let ratio = nums[ch] * inv_den * inv_den;
                        for v in 0..n {
                            ds[ch * n + v] =
                                -scale * (two * ts[ch * n + v] * inv_den - ratio);
                        }
                    }
                }
                acc(grads, *pred, dp);
            }
        }
    }

    fn backprop_conv3(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        g: &ArrayD<R>,
        grads: &mut Vec<Option<ArrayD<R>>>,
    ) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (cin, sp) = channel_spatial(xv.shape());
        let cout = wv.shape()[0];
        let n = sp[0] * sp[1] * sp[2];
        let npad = padded_len(sp);
        let gs = g.as_slice().unwrap();

        // grad bias
        let mut db = vec![R::zero(); cout];
        for o in 0..cout {
            db[o] = gs[o * n..(o + 1) * n].iter().copied().sum();
        }
        acc(grads, b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());

        let xp = pad1(xv.as_slice().unwrap(), cin, sp);
        let gp = pad1(gs, cout, sp);
        let ws = wv.as_slice().unwrap();
        let shifts = offset_shifts(sp);
        let k = 27 * cin;
        let chunk = conv3_chunk(cin, npad);
        let mut col = vec![R::zero(); k * chunk];
        let mut dcol = vec![R::zero(); k * chunk];
        let mut dw = ArrayD::<R>::zeros(wv.raw_dim());
        let mut dxp = vec![R::zero(); cin * npad];
        for j0c in (0..npad).step_by(chunk) {
            let j1c = (j0c + chunk).min(npad);
            let b = j1c - j0c;
            // grad weight: dW += Gpad_chunk . col_chunk^T (padding columns
            // of Gpad are zero, so garbage col columns contribute nothing)
            conv3_fill_col(cin, npad, &shifts, &xp, j0c, j1c, &mut col[..k * b]);
            unsafe {
                R::gemm(
                    cout,
                    b,
                    k,
                    R::one(),
                    gp.as_ptr().add(j0c),
                    npad as isize,
                    1,
                    col.as_ptr(),
                    1,
                    b as isize,
                    R::one(),
                    dw.as_slice_mut().unwrap().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            // grad input: dcol = W^T . Gpad_chunk, scattered back by offset
            unsafe {
                R::gemm(
                    k,
                    cout,
                    b,
                    R::one(),
                    ws.as_ptr(),
                    1,
                    k as isize,
                    gp.as_ptr().add(j0c),
                    npad as isize,
                    1,
                    R::zero(),
                    dcol.as_mut_ptr(),
                    b as isize,
                    1,
                );
            }
            for (k_idx, &s) in shifts.iter().enumerate() {
                let j0k = (-s).max(0) as usize;
                let j1k = npad - s.max(0) as usize;
                let lo = j0c.max(j0k);
                let hi = j1c.min(j1k);
                if lo >= hi {
                    continue;
                }
                for c in 0..cin {
                    let row = &dcol[(c * 27 + k_idx) * b..(c * 27 + k_idx) * b + b];
                    let dst0 = (c * npad) as isize + lo as isize + s;
                    let dst = &mut dxp[dst0 as usize..dst0 as usize + (hi - lo)];
                    for (d, &g) in dst.iter_mut().zip(&row[lo - j0c..hi - j0c]) {
                        *d += g;
                    }
                }
            }
        }
        acc(grads, w, dw);
        let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
        extract_core(&dxp, cin, sp, dx.as_slice_mut().unwrap());
        acc(grads, x, dx);
    }

    fn backprop_conv1(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        g: &ArrayD<R>,
        grads: &mut Vec<Option<ArrayD<R>>>,
    ) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (cin, sp) = channel_spatial(xv.shape());
        let cout = wv.shape()[0];
        let n = sp[0] * sp[1] * sp[2];
        let gs = g.as_slice().unwrap();
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();

        let mut db = vec![R::zero(); cout];
        for o in 0..cout {
            db[o] = gs[o * n..(o + 1) * n].iter().copied().sum();
        }
        acc(grads, b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());

        let mut dw = ArrayD::<R>::zeros(wv.raw_dim());
        unsafe {
            R::gemm(
                cout,
                n,
                cin,
                R::one(),
                gs.as_ptr(),
                n as isize,
                1,
                xs.as_ptr(),
                1,
                n as isize,
                R::zero(),
                dw.as_slice_mut().unwrap().as_mut_ptr(),
                cin as isize,
                1,
            );
        }
        acc(grads, w, dw);

        let mut dx = ArrayD::<R>::zeros(xv.raw_dim());
        unsafe {
            R::gemm(
                cin,
                cout,
                n,
                R::one(),
                ws.as_ptr(),
                1,
                cin as isize,
                gs.as_ptr(),
                n as isize,
                1,
                R::zero(),
                dx.as_slice_mut().unwrap().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        acc(grads, x, dx);
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<R: Real>(grads: &mut [Option<ArrayD<R>>], id: NodeId, delta: ArrayD<R>) {
    match &mut grads[id] {
        Some(gr) => *gr += &delta,
        slot @ None => *slot = Some(delta),
    }
}

// ---------------------------------------------------------------------------
// Convolution plumbing
// ---------------------------------------------------------------------------

fn padded_len(sp: [usize; 3]) -> usize {
    (sp[0] + 2) * (sp[1] + 2) * (sp[2] + 2)
}

/// Zero-pad each channel by one voxel per side.
fn pad1<R: Real>(xs: &[R], c: usize, sp: [usize; 3]) -> Vec<R> {
    let (w, h, d) = (sp[0], sp[1], sp[2]);
    let (ph, pd) = (h + 2, d + 2);
    let npad = padded_len(sp);
    let mut xp = vec![R::zero(); c * npad];
    for ch in 0..c {
        for xi in 0..w {
            for yi in 0..h {
                let src = ((ch * w + xi) * h + yi) * d;
                let dst = ch * npad + ((xi + 1) * ph + yi + 1) * pd + 1;
                xp[dst..dst + d].copy_from_slice(&xs[src..src + d]);
            }
        }
    }
    xp
}

/// Copy the core region out of a padded per-channel buffer.
fn extract_core<R: Real>(yp: &[R], c: usize, sp: [usize; 3], out: &mut [R]) {
    let (w, h, d) = (sp[0], sp[1], sp[2]);
    let (ph, pd) = (h + 2, d + 2);
    let npad = padded_len(sp);
    for ch in 0..c {
        for xi in 0..w {
            for yi in 0..h {
                let src = ch * npad + ((xi + 1) * ph + yi + 1) * pd + 1;
                let dst = ((ch * w + xi) * h + yi) * d;
                out[dst..dst + d].copy_from_slice(&yp[src..src + d]);
            }
        }
    }
}

/// Flat-index shifts in padded space for the 27 kernel offsets, in the same
/// order as the trailing weight axes.
fn offset_shifts(sp: [usize; 3]) -> Vec<isize> {
    let (ph, pd) = ((sp[1] + 2) as isize, (sp[2] + 2) as isize);
    let mut shifts = Vec::with_capacity(27);
    for kx in -1isize..=1 {
        for ky in -1isize..=1 {
            for kz in -1isize..=1 {
                shifts.push((kx * ph + ky) * pd + kz);
            }
        }
    }
    shifts
}

/// Column chunk length for im2col buffers (bounds transient memory and keeps
/// each gemm call well shaped).
fn conv3_chunk(cin: usize, npad: usize) -> usize {
    let budget = 4 << 20; // scalars per chunk buffer
    (budget / (27 * cin)).clamp(4096, npad.max(4096)).min(npad)
}

/// Fill chunk columns `[j0c, j1c)` of the im2col matrix. Row `(c, k)` holds
/// the padded input of channel `c` shifted by offset `k`; a spatial shift is
/// a constant flat offset in padded space, so every row is one memcpy.
/// Columns that fall in the padding compute garbage and are discarded with
/// the output padding.
fn conv3_fill_col<R: Real>(
    cin: usize,
    npad: usize,
    shifts: &[isize],
    xp: &[R],
    j0c: usize,
    j1c: usize,
    col: &mut [R],
) {
    let chunk = j1c - j0c;
    for (k_idx, &s) in shifts.iter().enumerate() {
        let j0k = (-s).max(0) as usize;
        let j1k = npad - s.max(0) as usize;
        let lo = j0c.max(j0k);
        let hi = j1c.min(j1k);
        for c in 0..cin {
            let row = &mut col[(c * 27 + k_idx) * chunk..(c * 27 + k_idx + 1) * chunk];
            if lo >= hi {
                row.fill(R::zero());
                continue;
            }
            row[..lo - j0c].fill(R::zero());
            row[hi - j0c..].fill(R::zero());
            let src0 = (c * npad) as isize + lo as isize + s;
            row[lo - j0c..hi - j0c]
                .copy_from_slice(&xp[src0 as usize..src0 as usize + (hi - lo)]);
        }
    }
}

/// `y_pad = W (cout x 27 cin) . im2col(x_pad)`, chunked over columns.
fn conv3_im2col_forward<R: Real>(
    cout: usize,
    cin: usize,
    sp: [usize; 3],
    ws: &[R],
    xp: &[R],
    yp: &mut [R],
) {
    let npad = padded_len(sp);
    let shifts = offset_shifts(sp);
    let k = 27 * cin;
    let chunk = conv3_chunk(cin, npad);
    let mut col = vec![R::zero(); k * chunk];
    for j0c in (0..npad).step_by(chunk) {
        let j1c = (j0c + chunk).min(npad);
        let b = j1c - j0c;
        conv3_fill_col(cin, npad, &shifts, xp, j0c, j1c, &mut col[..k * b]);
        unsafe {
            R::gemm(
                cout,
                k,
                b,
                R::one(),
                ws.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                b as isize,
                1,
                R::zero(),
                yp.as_mut_ptr().add(j0c),
                npad as isize,
                1,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Upsampling tables
// ---------------------------------------------------------------------------

struct UpsampleTable<R> {
    idx0: Vec<usize>,
    idx1: Vec<usize>,
    w0: Vec<R>,
    w1: Vec<R>,
}

impl<R: Real> UpsampleTable<R> {
    fn new(n: usize) -> Self {
        let m = n * 2;
        let mut idx0 = Vec::with_capacity(m);
        let mut idx1 = Vec::with_capacity(m);
        let mut w0 = Vec::with_capacity(m);
        let mut w1 = Vec::with_capacity(m);
        for o in 0..m {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0f = src.floor();
            let f = src - i0f;
            let i0 = (i0f.max(0.0) as usize).min(n - 1);
            let i1 = (((i0f + 1.0).max(0.0)) as usize).min(n - 1);
            idx0.push(i0);
            idx1.push(i1);
            w0.push(R::from_f64(1.0 - f));
            w1.push(R::from_f64(f));
        }
        Self { idx0, idx1, w0, w1 }
    }

    #[inline]
    fn at(&self, o: usize) -> (usize, usize, R, R) {
        (self.idx0[o], self.idx1[o], self.w0[o], self.w1[o])
    }
}

// ---------------------------------------------------------------------------
// Window iteration
// ---------------------------------------------------------------------------

#[inline]
fn for_window_voxels(win: &Window, sp: [usize; 3], mut f: impl FnMut(usize)) {
    let (h, d) = (sp[1], sp[2]);
    for x in win.start[0]..win.start[0] + win.size[0] {
        for y in win.start[1]..win.start[1] + win.size[1] {
            let base = (x * h + y) * d;
            for z in win.start[2]..win.start[2] + win.size[2] {
                f(base + z);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Affine warp (normalized coordinates, matches geom::warp_* semantics)
// ---------------------------------------------------------------------------

fn is_identity_params<R: Real>(p: &[R]) -> bool {
    const IDENT: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    p.iter()
        .zip(IDENT.iter())
        .all(|(&a, &b)| a.to_f64() == b)
}

#[inline]
fn idx_to_norm<R: Real>(i: usize, n: usize) -> R {
    if n <= 1 {
        R::zero()
    } else {
        R::from_f64(2.0) * R::from_f64(i as f64) / R::from_f64((n - 1) as f64) - R::one()
    }
}

#[inline]
fn norm_to_idx_scale<R: Real>(n: usize) -> R {
    if n <= 1 {
        R::zero()
    } else {
        R::from_f64((n - 1) as f64 * 0.5)
    }
}

/// Per-voxel sampling plan: the flat index of corner (0,0,0) when all eight
/// corners are in bounds (-1 otherwise), the floor indices, and the
/// fractional offsets. Shared by the warp forward and backward passes.
struct WarpPlan<R> {
    base: Vec<i64>,
    idx: Vec<[i32; 3]>,
    frac: Vec<[R; 3]>,
}

fn warp_coords<R: Real>(sp: [usize; 3], p: &[R]) -> WarpPlan<R> {
    let (w, h, d) = (sp[0], sp[1], sp[2]);
    let n = w * h * d;
    let scale = [
        norm_to_idx_scale::<R>(w),
        norm_to_idx_scale::<R>(h),
        norm_to_idx_scale::<R>(d),
    ];
    let mut base = vec![0i64; n];
    let mut idx = vec![[0i32; 3]; n];
    let mut frac = vec![[R::zero(); 3]; n];
    let mut v = 0usize;
    for xi in 0..w {
        let ux = idx_to_norm::<R>(xi, w);
        for yi in 0..h {
            let uy = idx_to_norm::<R>(yi, h);
            for zi in 0..d {
                let uz = idx_to_norm::<R>(zi, d);
                let y = [
                    p[0] * ux + p[1] * uy + p[2] * uz + p[9],
                    p[3] * ux + p[4] * uy + p[5] * uz + p[10],
                    p[6] * ux + p[7] * uy + p[8] * uz + p[11],
                ];
                let j = [
                    (y[0] + R::one()) * scale[0],
                    (y[1] + R::one()) * scale[1],
                    (y[2] + R::one()) * scale[2],
                ];
                for a in 0..3 {
                    let f = j[a].floor();
                    idx[v][a] = f.to_f64() as i32;
                    frac[v][a] = j[a] - f;
                }
                let [x0, y0, z0] = idx[v];
                base[v] = if x0 >= 0
                    && y0 >= 0
                    && z0 >= 0
                    && (x0 as usize) + 1 < w
                    && (y0 as usize) + 1 < h
                    && (z0 as usize) + 1 < d
                {
                    ((x0 as i64 * h as i64) + y0 as i64) * d as i64 + z0 as i64
                } else {
                    -1
                };
                v += 1;
            }
        }
    }
    WarpPlan { base, idx, frac }
}

fn warp_forward<R: Real>(xs: &[R], c: usize, sp: [usize; 3], p: &[R], out: &mut [R]) {
    let (w, h, d) = (sp[0] as i32, sp[1] as i32, sp[2] as i32);
    let n = sp[0] * sp[1] * sp[2];
    let plan = warp_coords(sp, p);
    let (hd, dd) = (sp[1] * sp[2], sp[2]);
    for ch in 0..c {
        let src = &xs[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for v in 0..n {
            let [fx, fy, fz] = plan.frac[v];
            let b = plan.base[v];
            if b >= 0 {
                let b = b as usize;
                let v000 = src[b];
                let v001 = src[b + 1];
                let v010 = src[b + dd];
                let v011 = src[b + dd + 1];
                let v100 = src[b + hd];
                let v101 = src[b + hd + 1];
                let v110 = src[b + hd + dd];
                let v111 = src[b + hd + dd + 1];
                let c00 = v000 + fz * (v001 - v000);
                let c01 = v010 + fz * (v011 - v010);
                let c10 = v100 + fz * (v101 - v100);
                let c11 = v110 + fz * (v111 - v110);
                let c0 = c00 + fy * (c01 - c00);
                let c1 = c10 + fy * (c11 - c10);
                dst[v] = c0 + fx * (c1 - c0);
            } else {
                let [x0, y0, z0] = plan.idx[v];
                let one = R::one();
                let mut accv = R::zero();
                for cx in 0..2i32 {
                    let sx = x0 + cx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let wx = if cx == 0 { one - fx } else { fx };
                    for cy in 0..2i32 {
                        let sy = y0 + cy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let wy = if cy == 0 { one - fy } else { fy };
                        for cz in 0..2i32 {
                            let sz = z0 + cz;
                            if sz < 0 || sz >= d {
                                continue;
                            }
                            let wz = if cz == 0 { one - fz } else { fz };
                            accv += wx * wy * wz * src[((sx * h + sy) * d + sz) as usize];
                        }
                    }
                }
                dst[v] = accv;
            }
        }
    }
}

fn warp_backward<R: Real>(
    xs: &[R],
    c: usize,
    sp: [usize; 3],
    p: &[R],
    gs: &[R],
    dx: &mut [R],
    dp: &mut [R],
) {
    let (w, h, d) = (sp[0] as i32, sp[1] as i32, sp[2] as i32);
    let n = sp[0] * sp[1] * sp[2];
    let plan = warp_coords(sp, p);
    let (hd, dd) = (sp[1] * sp[2], sp[2]);
    let one = R::one();
    // per-voxel gradient w.r.t. the fractional sample index, summed over
    // channels
    let mut gj = vec![[R::zero(); 3]; n];
    for ch in 0..c {
        let src = &xs[ch * n..(ch + 1) * n];
        let gsc = &gs[ch * n..(ch + 1) * n];
        let dxc = &mut dx[ch * n..(ch + 1) * n];
        for v in 0..n {
            let gv = gsc[v];
            if gv == R::zero() {
                continue;
            }
            let [fx, fy, fz] = plan.frac[v];
            let gjv = &mut gj[v];
            let b = plan.base[v];
            if b >= 0 {
                let b = b as usize;
                let v000 = src[b];
                let v001 = src[b + 1];
                let v010 = src[b + dd];
                let v011 = src[b + dd + 1];
                let v100 = src[b + hd];
                let v101 = src[b + hd + 1];
                let v110 = src[b + hd + dd];
                let v111 = src[b + hd + dd + 1];
                // z then y lerps; their differences give the index grads
                let c00 = v000 + fz * (v001 - v000);
                let c01 = v010 + fz * (v011 - v010);
                let c10 = v100 + fz * (v101 - v100);
                let c11 = v110 + fz * (v111 - v110);
                let c0 = c00 + fy * (c01 - c00);
                let c1 = c10 + fy * (c11 - c10);
                gjv[0] += gv * (c1 - c0);
                let dy0 = c01 - c00;
                let dy1 = c11 - c10;
                gjv[1] += gv * (dy0 + fx * (dy1 - dy0));
                let dz00 = v001 - v000;
                let dz01 = v011 - v010;
                let dz10 = v101 - v100;
                let dz11 = v111 - v110;
                let dz0 = dz00 + fy * (dz01 - dz00);
                let dz1 = dz10 + fy * (dz11 - dz10);
                gjv[2] += gv * (dz0 + fx * (dz1 - dz0));
                let (wx0, wx1) = (one - fx, fx);
                let (wy0, wy1) = (one - fy, fy);
                let (wz0, wz1) = (one - fz, fz);
                let g00 = gv * wx0 * wy0;
                let g01 = gv * wx0 * wy1;
                let g10 = gv * wx1 * wy0;
                let g11 = gv * wx1 * wy1;
                dxc[b] += g00 * wz0;
                dxc[b + 1] += g00 * wz1;
                dxc[b + dd] += g01 * wz0;
                dxc[b + dd + 1] += g01 * wz1;
                dxc[b + hd] += g10 * wz0;
                dxc[b + hd + 1] += g10 * wz1;
                dxc[b + hd + dd] += g11 * wz0;
                dxc[b + hd + dd + 1] += g11 * wz1;
            } else {
                let [x0, y0, z0] = plan.idx[v];
                for cx in 0..2i32 {
                    let sx = x0 + cx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let (wx, dwx) = if cx == 0 { (one - fx, -one) } else { (fx, one) };
                    for cy in 0..2i32 {
                        let sy = y0 + cy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let (wy, dwy) = if cy == 0 { (one - fy, -one) } else { (fy, one) };
                        for cz in 0..2i32 {
                            let sz = z0 + cz;
                            if sz < 0 || sz >= d {
                                continue;
                            }
                            let (wz, dwz) = if cz == 0 { (one - fz, -one) } else { (fz, one) };
                            let src_i = ((sx * h + sy) * d + sz) as usize;
                            let val = src[src_i];
                            dxc[src_i] += gv * wx * wy * wz;
                            gjv[0] += gv * dwx * wy * wz * val;
                            gjv[1] += gv * wx * dwy * wz * val;
                            gjv[2] += gv * wx * wy * dwz * val;
                        }
                    }
                }
            }
        }
    }
    // chain through j = (y + 1) * scale and y = M u + t
    let scale = [
        norm_to_idx_scale::<R>(sp[0]),
        norm_to_idx_scale::<R>(sp[1]),
        norm_to_idx_scale::<R>(sp[2]),
    ];
    let mut v = 0usize;
    for xi in 0..sp[0] {
        let ux = idx_to_norm::<R>(xi, sp[0]);
        for yi in 0..sp[1] {
            let uy = idx_to_norm::<R>(yi, sp[1]);
            for zi in 0..sp[2] {
                let uz = idx_to_norm::<R>(zi, sp[2]);
                let dy = [
                    gj[v][0] * scale[0],
                    gj[v][1] * scale[1],
                    gj[v][2] * scale[2],
                ];
                let u = [ux, uy, uz];
                for r in 0..3 {
                    for (k, uk) in u.iter().enumerate() {
                        dp[r * 3 + k] += dy[r] * *uk;
                    }
                    dp[9 + r] += dy[r];
                }
                v += 1;
            }
        }
    }
}
