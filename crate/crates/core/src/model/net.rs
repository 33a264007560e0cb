//! Forward passes: the 3D UNet feature extractor, base-class segmentation
//! head, affine transform head, and the per-episode pipeline tying them
//! together on the autodiff tape.

use ndarray::{Array3, Array4, ArrayD, IxDyn};

use crate::geom::{invert, warp_mask, AffineTransform, FeatureMap, Interpolation, MaskVolume, Volume};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::Real;

use super::config::{ModelConfig, Variant};
use super::params::ParamSet;
use super::proto::WindowGrid;
use super::ModelError;

/// Parameter leaves pushed onto a tape, aligned with the `ParamSet` order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
}

impl ParamNodes {
    pub fn push<R: Real>(tape: &mut Tape<R>, params: &ParamSet<R>) -> Self {
        let mut ids = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            ids.push(tape.leaf(value.clone()));
            names.push(name.clone());
        }
        Self { ids, names }
    }

    pub fn id(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }
}

fn conv3_block<R: Real>(
    tape: &mut Tape<R>,
    p: &ParamNodes,
    prefix: &str,
    x: NodeId,
    norm: bool,
) -> NodeId {
    let w = p.id(&format!("{prefix}.w"));
    let b = p.id(&format!("{prefix}.b"));
    let mut cur = tape.conv3(x, w, b);
    if norm {
        let gamma = p.id(&format!("{prefix}.in.gamma"));
        let beta = p.id(&format!("{prefix}.in.beta"));
        cur = tape.instance_norm(cur, gamma, beta);
    }
    tape.relu(cur)
}

/// UNet-style encoder/decoder with additive skips; output has the input's
/// spatial shape and `feat_channels` channels.
pub fn extractor_forward<R: Real>(
    tape: &mut Tape<R>,
    p: &ParamNodes,
    config: &ModelConfig,
    image: NodeId,
) -> NodeId {
    let norm = config.instance_norm;
    let levels = config.widths.len();
    let mut cur = image;
    if config.stem_pool {
        cur = tape.avg_pool2(cur);
    }
    cur = conv3_block(tape, p, "ext.enc0", cur, norm);
    let mut skips = vec![cur];
    for i in 1..levels {
        cur = tape.avg_pool2(cur);
        cur = conv3_block(tape, p, &format!("ext.enc{i}"), cur, norm);
        skips.push(cur);
    }
    cur = conv3_block(tape, p, "ext.bott", cur, norm);
    for i in (0..levels - 1).rev() {
        cur = tape.upsample2(cur);
        let w = p.id(&format!("ext.dec{i}.proj.w"));
        let b = p.id(&format!("ext.dec{i}.proj.b"));
        cur = tape.conv1(cur, w, b);
        cur = tape.add(cur, skips[i]);
        cur = conv3_block(tape, p, &format!("ext.dec{i}"), cur, norm);
    }
    if config.stem_pool {
        cur = tape.upsample2(cur);
    }
    let w = p.id("ext.head.w");
    let b = p.id("ext.head.b");
    tape.conv1(cur, w, b)
}

/// Pointwise segmentation head: `(C_f, ...) -> (num_classes + 1, ...)`
/// channel softmax.
pub fn seg_head_forward<R: Real>(
    tape: &mut Tape<R>,
    p: &ParamNodes,
    features: NodeId,
) -> NodeId {
    let h = tape.conv1(features, p.id("seg.hidden.w"), p.id("seg.hidden.b"));
    let h = tape.relu(h);
    let logits = tape.conv1(h, p.id("seg.out.w"), p.id("seg.out.b"));
    tape.softmax_channels(logits)
}

const IDENTITY_PARAMS: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Affine head: pooled conv trunk over the soft base-class prediction, then
/// a zero-initialized regressor emitting a bounded delta on top of the
/// identity transform. The returned node holds the 12 transform parameters.
pub fn affine_head_forward<R: Real>(
    tape: &mut Tape<R>,
    p: &ParamNodes,
    config: &ModelConfig,
    seg_soft: NodeId,
) -> NodeId {
    let norm = config.instance_norm;
    let mut cur = tape.avg_pool2(seg_soft);
    cur = tape.avg_pool2(cur);
    cur = conv3_block(tape, p, "aff.conv0", cur, norm);
    cur = tape.avg_pool2(cur);
    {
        let w = p.id("aff.conv1.w");
        let b = p.id("aff.conv1.b");
        cur = tape.conv3(cur, w, b);
        cur = tape.relu(cur);
    }
    let pooled = tape.global_mean(cur);
    let h = tape.linear(pooled, p.id("aff.fc0.w"), p.id("aff.fc0.b"));
    let h = tape.relu(h);
    let raw = tape.linear(h, p.id("aff.out.w"), p.id("aff.out.b"));
    // bounded delta: 0.5 * tanh(raw); zero-initialized output layer means the
    // head starts at exactly the identity transform
    let t = tape.tanh(raw);
    let mut delta = tape.scale(t, R::from_f64(0.5));
    let ident = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[12]), IDENTITY_PARAMS.map(R::from_f64).to_vec()).unwrap(),
    );
    let mut params = tape.add(ident, delta);

    // keep |det| >= 0.1: shrink the delta (treated as a constant factor in
    // the gradient) until the linear part is comfortably invertible
    let det = transform_from_node(tape, params).det();
    if det.abs() < 0.1 {
        let mut lambda = 1.0f64;
        for _ in 0..60 {
            lambda *= 0.5;
            let scaled: Vec<f64> = tape
                .value(delta)
                .iter()
                .enumerate()
                .map(|(i, v)| IDENTITY_PARAMS[i] + (*v).to_f64() * lambda)
                .collect();
            if AffineTransform::from_params(&scaled.try_into().unwrap())
                .det()
                .abs()
                >= 0.1
            {
                break;
            }
        }
        delta = tape.scale(delta, R::from_f64(lambda));
        let ident2 = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[12]), IDENTITY_PARAMS.map(R::from_f64).to_vec())
                .unwrap(),
        );
        params = tape.add(ident2, delta);
    }
    params
}

pub fn transform_from_node<R: Real>(tape: &Tape<R>, params: NodeId) -> AffineTransform {
    let v = tape.value(params).as_slice().unwrap();
    let mut arr = [0.0f64; 12];
    for (a, b) in arr.iter_mut().zip(v.iter()) {
        *a = (*b).to_f64();
    }
    AffineTransform::from_params(&arr)
}

// ---------------------------------------------------------------------------
// Episode forward
// ---------------------------------------------------------------------------

/// The volumes an episode forward consumes. Multi-class label targets for
/// the segmentation/alignment losses are attached by the trainer.
#[derive(Clone, Debug)]
pub struct EpisodeData {
    pub support_image: Volume,
    /// Hard binary mask of the sampled class on the support subject.
    pub support_mask: MaskVolume,
    pub query_image: Volume,
    /// Ground-truth query mask; required for training, optional at pure
    /// inference.
    pub query_mask: Option<MaskVolume>,
    /// For the supervised variant: the segmentation-head channel of the
    /// episode's class.
    pub supervised_class_channel: Option<usize>,
}

/// Tape, node handles and the final prediction for one episode.
pub struct EpisodeForward<R: Real> {
    pub tape: Tape<R>,
    pub param_ids: Vec<NodeId>,
    /// Soft query prediction node; lives in aligned space for the align
    /// variant.
    pub prediction_node: NodeId,
    /// Final soft prediction in query space (inverse-warped for the align
    /// variant).
    pub prediction: MaskVolume,
    /// Query-mask node the few-shot loss compares against (warped into
    /// aligned space for the align variant).
    pub fewshot_target: Option<NodeId>,
    /// Softmax base-class predictions (when the head exists).
    pub seg_q: Option<NodeId>,
    pub seg_s: Option<NodeId>,
    /// Atlas-space (warped) base-class predictions for the alignment loss.
    pub aligned_seg_q: Option<NodeId>,
    pub aligned_seg_s: Option<NodeId>,
    pub tau_q: Option<AffineTransform>,
    pub tau_s: Option<AffineTransform>,
}

fn volume_leaf<R: Real>(tape: &mut Tape<R>, v: &Volume) -> NodeId {
    let [w, h, d] = v.shape();
    let data = ArrayD::from_shape_vec(
        IxDyn(&[1, w, h, d]),
        v.data.iter().map(|&x| R::from_f64(x as f64)).collect(),
    )
    .unwrap();
    tape.leaf(data)
}

fn mask_leaf<R: Real>(tape: &mut Tape<R>, m: &MaskVolume) -> NodeId {
    let [w, h, d] = m.shape();
    let data = ArrayD::from_shape_vec(
        IxDyn(&[w, h, d]),
        m.data.iter().map(|&x| R::from_f64(x as f64)).collect(),
    )
    .unwrap();
    tape.leaf(data)
}

fn node_to_soft_mask<R: Real>(value: &ArrayD<R>) -> MaskVolume {
    let sh = value.shape();
    let data = Array3::from_shape_vec(
        (sh[0], sh[1], sh[2]),
        value
            .iter()
            .map(|&v| (v.to_f64() as f32).clamp(0.0, 1.0))
            .collect(),
    )
    .unwrap();
    MaskVolume { data, hard: false }
}

pub fn forward_episode<R: Real>(
    config: &ModelConfig,
    params: &ParamSet<R>,
    episode: &EpisodeData,
) -> Result<EpisodeForward<R>, ModelError> {
    config.validate()?;
    let shape = episode.query_image.shape();
    if episode.support_image.shape() != shape || episode.support_mask.shape() != shape {
        return Err(ModelError::ShapeMismatch(
            "support and query shapes must match within an episode".into(),
        ));
    }
    config.check_shape(shape)?;

    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, params);
    let param_ids = pn.ids.clone();

    if config.variant == Variant::Supervised {
        let channel = episode.supervised_class_channel.ok_or_else(|| {
            ModelError::ConfigMismatch(
                "supervised episodes need supervised_class_channel".into(),
            )
        })?;
        let q_img = volume_leaf(&mut tape, &episode.query_image);
        let f_q = extractor_forward(&mut tape, &pn, config, q_img);
        let seg_q = seg_head_forward(&mut tape, &pn, f_q);
        let value = tape.value(seg_q);
        if channel >= value.shape()[0] {
            return Err(ModelError::ConfigMismatch(format!(
                "class channel {channel} out of range for {} channels",
                value.shape()[0]
            )));
        }
        let pred = value.index_axis(ndarray::Axis(0), channel).to_owned();
        let prediction = node_to_soft_mask(&pred.into_dyn());
        return Ok(EpisodeForward {
            tape,
            param_ids,
            prediction_node: seg_q,
            prediction,
            fewshot_target: None,
            seg_q: Some(seg_q),
            seg_s: None,
            aligned_seg_q: None,
            aligned_seg_s: None,
            tau_q: None,
            tau_s: None,
        });
    }

    let s_img = volume_leaf(&mut tape, &episode.support_image);
    let q_img = volume_leaf(&mut tape, &episode.query_image);
    let f_s = extractor_forward(&mut tape, &pn, config, s_img);
    let f_q = extractor_forward(&mut tape, &pn, config, q_img);

    let (seg_q, seg_s) = if config.variant.use_seg_head() {
        (
            Some(seg_head_forward(&mut tape, &pn, f_q)),
            Some(seg_head_forward(&mut tape, &pn, f_s)),
        )
    } else {
        (None, None)
    };

    let s_mask = mask_leaf(&mut tape, &episode.support_mask);
    let q_mask = episode
        .query_mask
        .as_ref()
        .map(|m| mask_leaf(&mut tape, m));

    let grid = WindowGrid::new(shape, config.window_ratios)?;

    let (match_features_q, pool_features_s, pool_mask_s, fewshot_target, tau_q, tau_s, aligned) =
        if config.variant.use_align_head() {
            let tq = affine_head_forward(&mut tape, &pn, config, seg_q.unwrap());
            let ts = affine_head_forward(&mut tape, &pn, config, seg_s.unwrap());
            let f_q_t = tape.warp_affine(f_q, tq);
            let f_s_t = tape.warp_affine(f_s, ts);
            let m_s_t = tape.warp_affine(s_mask, ts);
            let target = q_mask.map(|m| tape.warp_affine(m, tq));
            let a_q = tape.warp_affine(seg_q.unwrap(), tq);
            let a_s = tape.warp_affine(seg_s.unwrap(), ts);
            let tau_q = transform_from_node(&tape, tq);
            let tau_s = transform_from_node(&tape, ts);
            (
                f_q_t,
                f_s_t,
                m_s_t,
                target,
                Some(tau_q),
                Some(tau_s),
                (Some(a_q), Some(a_s)),
            )
        } else {
            (f_q, f_s, s_mask, q_mask, None, None, (None, None))
        };

    // class prototypes from the (possibly aligned) support mask, background
    // prototypes from its complement
    let ones = tape.leaf(ArrayD::from_elem(
        IxDyn(&[shape[0], shape[1], shape[2]]),
        R::one(),
    ));
    let bg_mask = tape.sub(ones, pool_mask_s);
    let (protos_c, _) = tape
        .window_pool(pool_features_s, pool_mask_s, &grid.windows)
        .ok_or(ModelError::NoValidPrototype("class"))?;
    let (protos_0, _) = tape
        .window_pool(pool_features_s, bg_mask, &grid.windows)
        .ok_or(ModelError::NoValidPrototype("background"))?;

    let s_c = tape.cosine_max(match_features_q, protos_c);
    let s_0 = tape.cosine_max(match_features_q, protos_0);
    let diff = tape.sub(s_c, s_0);
    let prediction_node = tape.sigmoid(diff);

    let prediction = if let Some(tau_q) = &tau_q {
        let aligned_pred = node_to_soft_mask(tape.value(prediction_node));
        let inv = invert(tau_q).map_err(|e| ModelError::ShapeError(e.to_string()))?;
        warp_mask(&aligned_pred, &inv, Interpolation::Trilinear)
            .map_err(|e| ModelError::ShapeError(e.to_string()))?
    } else {
        node_to_soft_mask(tape.value(prediction_node))
    };

    Ok(EpisodeForward {
        tape,
        param_ids,
        prediction_node,
        prediction,
        fewshot_target,
        seg_q,
        seg_s,
        aligned_seg_q: aligned.0,
        aligned_seg_s: aligned.1,
        tau_q,
        tau_s,
    })
}

/// Single-image forward for supervised training: extractor + full-class
/// segmentation head.
pub fn forward_supervised<R: Real>(
    config: &ModelConfig,
    params: &ParamSet<R>,
    image: &Volume,
) -> Result<(Tape<R>, Vec<NodeId>, NodeId), ModelError> {
    config.validate()?;
    config.check_shape(image.shape())?;
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, params);
    let ids = pn.ids.clone();
    let img = volume_leaf(&mut tape, image);
    let f = extractor_forward(&mut tape, &pn, config, img);
    let seg = seg_head_forward(&mut tape, &pn, f);
    Ok((tape, ids, seg))
}

// ---------------------------------------------------------------------------
// Reference-path wrappers over the tape (public single-call ops)
// ---------------------------------------------------------------------------

/// Run the extractor on one volume.
pub fn extract_features<R: Real>(
    config: &ModelConfig,
    params: &ParamSet<R>,
    image: &Volume,
) -> Result<FeatureMap, ModelError> {
    config.validate()?;
    config.check_shape(image.shape())?;
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, params);
    let img = volume_leaf(&mut tape, image);
    let f = extractor_forward(&mut tape, &pn, config, img);
    let v = tape.value(f);
    let sh = v.shape();
    let data = Array4::from_shape_vec(
        (sh[0], sh[1], sh[2], sh[3]),
        v.iter().map(|&x| x.to_f64() as f32).collect(),
    )
    .unwrap();
    FeatureMap::new(data).map_err(|e| ModelError::ShapeError(e.to_string()))
}

/// Run the segmentation head on a feature map, returning the softmax
/// base-class prediction of shape `(num_classes + 1, W, H, D)`.
pub fn segment_base_classes<R: Real>(
    config: &ModelConfig,
    params: &ParamSet<R>,
    features: &FeatureMap,
) -> Result<Array4<f32>, ModelError> {
    if !config.variant.use_seg_head() {
        return Err(ModelError::HeadDisabled("segmentation head"));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, params);
    let f = tape.leaf(
        ArrayD::from_shape_vec(
            IxDyn(&[
                features.channels(),
                features.spatial_shape()[0],
                features.spatial_shape()[1],
                features.spatial_shape()[2],
            ]),
            features
                .data
                .iter()
                .map(|&x| R::from_f64(x as f64))
                .collect(),
        )
        .unwrap(),
    );
    let seg = seg_head_forward(&mut tape, &pn, f);
    let v = tape.value(seg);
    let sh = v.shape();
    Ok(Array4::from_shape_vec(
        (sh[0], sh[1], sh[2], sh[3]),
        v.iter().map(|&x| x.to_f64() as f32).collect(),
    )
    .unwrap())
}

/// Regress an affine transform from a soft base-class prediction.
pub fn predict_affine<R: Real>(
    config: &ModelConfig,
    params: &ParamSet<R>,
    seg_soft: &Array4<f32>,
) -> Result<AffineTransform, ModelError> {
    if !config.variant.use_align_head() {
        return Err(ModelError::HeadDisabled("affine head"));
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, params);
    let sh = seg_soft.dim();
    let s = tape.leaf(
        ArrayD::from_shape_vec(
            IxDyn(&[sh.0, sh.1, sh.2, sh.3]),
            seg_soft.iter().map(|&x| R::from_f64(x as f64)).collect(),
        )
        .unwrap(),
    );
    let p = affine_head_forward(&mut tape, &pn, config, s);
    Ok(transform_from_node(&tape, p))
}
