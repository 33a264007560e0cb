//! Losses (few-shot Dice, base-class segmentation, atlas alignment), the
//! Adam optimizer, and the episodic / supervised training loops with
//! checkpointing and a CSV metrics log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{
    augment, sample_training_episode, AugmentRanges, EpisodeError, EpisodeSpec, SplitSpec,
};
use crate::geom::MaskVolume;
use crate::model::{
    build_atlas, forward_episode, forward_supervised, init_params, save_checkpoint, AdamState,
    Atlas, Checkpoint, EpisodeData, ModelConfig, ModelError, ParamSet, Variant,
};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::Real;
use crate::phantom::{mix_seed, Dataset, LabeledSubject, PhantomError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite total loss at step {0}; training diverged")]
    Divergence(u64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub lambda_seg: f64,
    pub lambda_align: f64,
    pub seed: u64,
    pub augment: AugmentRanges,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            lambda_seg: 1.0,
            lambda_align: 1.0,
            seed: 0,
            augment: AugmentRanges::default(),
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

/// Per-step loss values; `total = few_shot + lambda_seg * seg +
/// lambda_align * align` with absent terms contributing zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub few_shot: f64,
    pub seg: Option<f64>,
    pub align: Option<f64>,
    pub total: f64,
    /// Dice loss of the inverse-warped prediction against the original
    /// query mask; logged for the align variant, never optimized.
    pub few_shot_unaligned: Option<f64>,
}

impl LossReport {
    pub fn composition_residual(&self, lambda_seg: f64, lambda_align: f64) -> f64 {
        let recomposed = self.few_shot
            + lambda_seg * self.seg.unwrap_or(0.0)
            + lambda_align * self.align.unwrap_or(0.0);
        (self.total - recomposed).abs()
    }
}

// ---------------------------------------------------------------------------
// Plain-array Dice (shared formula; the tape op mirrors this)
// ---------------------------------------------------------------------------

pub const DICE_DELTA: f64 = 1e-5;

/// Soft Dice loss `1 - (2 sum(p t) + d) / (sum p + sum t + d)` on plain
/// arrays.
pub fn dice_loss_value(pred: &Array3<f32>, target: &Array3<f32>) -> Result<f64, ModelError> {
    if pred.dim() != target.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut inter = 0.0f64;
    let mut ps = 0.0f64;
    let mut ts = 0.0f64;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p as f64 * t as f64;
        ps += p as f64;
        ts += t as f64;
    }
    Ok(1.0 - (2.0 * inter + DICE_DELTA) / (ps + ts + DICE_DELTA))
}

// ---------------------------------------------------------------------------
// Loss graph assembly
// ---------------------------------------------------------------------------

/// Base-class one-hot target `(n_base + 1, W, H, D)` from a label map.
/// Classes outside `base_classes` (the novel ones) count as background.
pub fn base_onehot<R: Real>(
    masks: &[MaskVolume],
    shape: [usize; 3],
) -> ArrayD<R> {
    let nb = masks.len();
    let mut out = ArrayD::<R>::zeros(IxDyn(&[nb + 1, shape[0], shape[1], shape[2]]));
    let n = shape[0] * shape[1] * shape[2];
    {
        let os = out.as_slice_mut().unwrap();
        for (bi, m) in masks.iter().enumerate() {
            let ms = m.data.as_slice().unwrap();
            for (v, &mv) in ms.iter().enumerate() {
                os[(bi + 1) * n + v] = R::from_f64(mv as f64);
            }
        }
        for v in 0..n {
            let mut fg = R::zero();
            for bi in 0..nb {
                fg += os[(bi + 1) * n + v];
            }
            os[v] = (R::one() - fg).max(R::zero());
        }
    }
    out
}

/// Sum of foreground-mean Dice losses of the query and support base-class
/// predictions against their one-hot targets.
pub fn seg_loss<R: Real>(
    tape: &mut Tape<R>,
    pred_q: NodeId,
    target_q: ArrayD<R>,
    pred_s: NodeId,
    target_s: ArrayD<R>,
) -> NodeId {
    let a = tape.multiclass_dice_fg(pred_q, target_q);
    let b = tape.multiclass_dice_fg(pred_s, target_s);
    tape.add(a, b)
}

/// Sum of foreground-mean Dice losses of the two atlas-space (warped)
/// base-class predictions against the atlas.
pub fn align_loss<R: Real>(
    tape: &mut Tape<R>,
    warped_q: NodeId,
    warped_s: NodeId,
    atlas: &Atlas,
) -> NodeId {
    let target = atlas_target::<R>(atlas);
    let a = tape.multiclass_dice_fg(warped_q, target.clone());
    let b = tape.multiclass_dice_fg(warped_s, target);
    tape.add(a, b)
}

pub fn atlas_target<R: Real>(atlas: &Atlas) -> ArrayD<R> {
    let d = atlas.data.dim();
    ArrayD::from_shape_vec(
        IxDyn(&[d.0, d.1, d.2, d.3]),
        atlas.data.iter().map(|&v| R::from_f64(v as f64)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub struct Adam<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64, params: &ParamSet<R>) -> Self {
        let zeros: Vec<ArrayD<R>> = params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn resume(lr: f64, state: AdamState<R>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<R>, grads: &[Option<&ArrayD<R>>]) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let b1 = R::from_f64(self.beta1);
        let b2 = R::from_f64(self.beta2);
        let one = R::one();
        let bc1 = R::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = R::from_f64(1.0 - self.beta2.powi(t));
        let lr = R::from_f64(self.lr);
        let eps = R::from_f64(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let p = &mut params.entry_mut(i).1;
            let (ms, vs, ps, gs) = (
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                p.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for j in 0..gs.len() {
                let gj = gs[j];
                ms[j] = b1 * ms[j] + (one - b1) * gj;
                vs[j] = b2 * vs[j] + (one - b2) * gj * gj;
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                ps[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Episode preparation
// ---------------------------------------------------------------------------

/// Assemble the volumes for one episode, optionally augmenting each subject
/// with its own sampled affine. Returns the episode data plus the base-class
/// one-hot targets for the query and support subjects.
pub fn prepare_episode<R: Real>(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    base_classes: &[String],
    augment_with: Option<(&AugmentRanges, &mut ChaCha8Rng)>,
    supervised_class_channel: Option<usize>,
) -> Result<(EpisodeData, ArrayD<R>, ArrayD<R>), TrainError> {
    let support = dataset
        .subject(&spec.support_id)
        .ok_or_else(|| TrainError::Invalid(format!("unknown subject {}", spec.support_id)))?;
    let query = dataset
        .subject(&spec.query_id)
        .ok_or_else(|| TrainError::Invalid(format!("unknown subject {}", spec.query_id)))?;

    let collect = |s: &LabeledSubject| -> Result<Vec<MaskVolume>, TrainError> {
        let mut masks = Vec::with_capacity(base_classes.len() + 1);
        masks.push(s.class_mask(&spec.class).ok_or_else(|| {
            TrainError::Invalid(format!("subject {} lacks class {}", s.id, spec.class))
        })?);
        for c in base_classes {
            masks.push(s.class_mask(c).ok_or_else(|| {
                TrainError::Invalid(format!("subject {} lacks class {c}", s.id))
            })?);
        }
        Ok(masks)
    };

    let shape = query.shape();
    let (s_img, s_masks, q_img, q_masks) = match augment_with {
        Some((ranges, rng)) => {
            let (s_img, s_masks, _) = augment(&support.image, &collect(support)?, ranges, rng);
            let (q_img, q_masks, _) = augment(&query.image, &collect(query)?, ranges, rng);
            (s_img, s_masks, q_img, q_masks)
        }
        None => (
            support.image.clone(),
            collect(support)?,
            query.image.clone(),
            collect(query)?,
        ),
    };

    let onehot_s = base_onehot::<R>(&s_masks[1..], shape);
    let onehot_q = base_onehot::<R>(&q_masks[1..], shape);
    let episode = EpisodeData {
        support_image: s_img,
        support_mask: s_masks[0].clone(),
        query_image: q_img,
        query_mask: Some(q_masks[0].clone()),
        supervised_class_channel,
    };
    Ok((episode, onehot_q, onehot_s))
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub atlas_institution: Option<String>,
    pub final_loss: LossReport,
}

fn metrics_header() -> &'static str {
    "step,few_shot,seg,align,total,few_shot_unaligned,wall_time\n"
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Pick the atlas institution (seeded) and average its training subjects.
pub fn training_atlas(
    dataset: &Dataset,
    split: &SplitSpec,
    seed: u64,
) -> Result<(Atlas, String), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA71A5, 0));
    let inst = split.base_institutions[rng.random_range(0..split.base_institutions.len())].clone();
    let subjects: Vec<&LabeledSubject> = split.train_subjects[&inst]
        .iter()
        .map(|id| {
            dataset
                .subject(id)
                .ok_or_else(|| TrainError::Invalid(format!("unknown subject {id}")))
        })
        .collect::<Result<_, _>>()?;
    let atlas = build_atlas(&subjects, &split.base_classes)?;
    Ok((atlas, inst))
}

/// Episodic training of one of the few-shot variants.
pub fn train<R: Real>(
    dataset: &Dataset,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint<R>>,
) -> Result<TrainOutcome, TrainError> {
    if model_config.variant == Variant::Supervised {
        return train_supervised(dataset, split, model_config, train_config, out_dir, resume);
    }
    if model_config.num_classes != split.base_classes.len() {
        return Err(TrainError::Invalid(format!(
            "model num_classes {} must equal the {} base classes",
            model_config.num_classes,
            split.base_classes.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let seed = train_config.seed;

    let (atlas, atlas_inst) = if model_config.variant.use_align_head() {
        let (a, i) = training_atlas(dataset, split, seed)?;
        (Some(a), Some(i))
    } else {
        (None, None)
    };

    let (mut params, mut adam, start_step) = match resume {
        Some(ckpt) => {
            crate::model::checkpoint::require_config(&ckpt.config, model_config)?;
            let adam = match ckpt.adam {
                Some(state) => Adam::resume(train_config.learning_rate, state),
                None => Adam::new(train_config.learning_rate, &ckpt.params),
            };
            (ckpt.params, adam, ckpt.step)
        }
        None => {
            let params = init_params::<R>(model_config, seed);
            let adam = Adam::new(train_config.learning_rate, &params);
            (params, adam, 0)
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if start_step == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        f.write_all(metrics_header().as_bytes())?;
        f
    } else {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    };

    let t0 = Instant::now();
    let mut last_report = LossReport {
        few_shot: f64::NAN,
        seg: None,
        align: None,
        total: f64::NAN,
        few_shot_unaligned: None,
    };

    for step in start_step + 1..=train_config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x57E9, step));
        let report = loop {
            let spec = sample_training_episode(split, &dataset.manifest, &mut rng)?;
            debug_assert!(split.base_classes.contains(&spec.class));
            let (episode, onehot_q, onehot_s) = prepare_episode::<R>(
                dataset,
                &spec,
                &split.base_classes,
                Some((&train_config.augment, &mut rng)),
                None,
            )?;
            match forward_episode(model_config, &params, &episode) {
                Ok(mut fwd) => {
                    let report = optimize_step(
                        &mut fwd,
                        &episode,
                        onehot_q,
                        onehot_s,
                        atlas.as_ref(),
                        model_config,
                        train_config,
                        &mut params,
                        &mut adam,
                        step,
                    )?;
                    break report;
                }
                // empty support prototypes after augmentation: skip episode
                Err(ModelError::NoValidPrototype(_)) | Err(ModelError::EmptyMask) => continue,
                Err(e) => return Err(e.into()),
            }
        };
        debug_assert!(
            report.composition_residual(train_config.lambda_seg, train_config.lambda_align)
                < 1e-4
        );
        last_report = report;
        if step % train_config.log_every == 0 || step == train_config.steps {
            writeln!(
                metrics,
                "{step},{:.6},{},{},{:.6},{},{:.3}",
                report.few_shot,
                fmt_opt(report.seg),
                fmt_opt(report.align),
                report.total,
                fmt_opt(report.few_shot_unaligned),
                t0.elapsed().as_secs_f64()
            )?;
        }
        if train_config.checkpoint_every > 0
            && (step % train_config.checkpoint_every == 0 || step == train_config.steps)
        {
            let ckpt = Checkpoint {
                config: model_config.clone(),
                params: params.clone(),
                adam: Some(adam.state.clone()),
                step,
                seed,
                atlas_institution: atlas_inst.clone(),
            };
            save_checkpoint(&out_dir.join("checkpoint.bin"), &ckpt)?;
        }
    }

    let ckpt_path = out_dir.join("checkpoint.bin");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            config: model_config.clone(),
            params,
            adam: Some(adam.state.clone()),
            step: train_config.steps,
            seed,
            atlas_institution: atlas_inst.clone(),
        },
    )?;
    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        metrics_path,
        atlas_institution: atlas_inst,
        final_loss: last_report,
    })
}

#[allow(clippy::too_many_arguments)]
fn optimize_step<R: Real>(
    fwd: &mut crate::model::EpisodeForward<R>,
    episode: &EpisodeData,
    onehot_q: ArrayD<R>,
    onehot_s: ArrayD<R>,
    atlas: Option<&Atlas>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    params: &mut ParamSet<R>,
    adam: &mut Adam<R>,
    step: u64,
) -> Result<LossReport, TrainError> {
    let tape = &mut fwd.tape;
    let target = fwd
        .fewshot_target
        .ok_or_else(|| TrainError::Invalid("training episode lacks a query mask".into()))?;
    let few = tape.dice_loss(fwd.prediction_node, target);
    let mut total = few;
    let mut seg_value = None;
    let mut align_value = None;

    if model_config.variant.use_seg_head() {
        let s = seg_loss(tape, fwd.seg_q.unwrap(), onehot_q, fwd.seg_s.unwrap(), onehot_s);
        seg_value = Some(scalar(tape, s));
        let scaled = tape.scale(s, R::from_f64(train_config.lambda_seg));
        total = tape.add(total, scaled);
    }
    if model_config.variant.use_align_head() {
        let atlas = atlas.expect("align variant always builds an atlas");
        let a = align_loss(
            tape,
            fwd.aligned_seg_q.unwrap(),
            fwd.aligned_seg_s.unwrap(),
            atlas,
        );
        align_value = Some(scalar(tape, a));
        let scaled = tape.scale(a, R::from_f64(train_config.lambda_align));
        total = tape.add(total, scaled);
    }

    let few_value = scalar(tape, few);
    let total_value = scalar(tape, total);
    if !total_value.is_finite() {
        return Err(TrainError::Divergence(step));
    }

    let few_unaligned = if model_config.variant.use_align_head() {
        let gt = episode
            .query_mask
            .as_ref()
            .expect("training episodes carry the query mask");
        Some(dice_loss_value(&fwd.prediction.data, &gt.data)?)
    } else {
        None
    };

    let grads = tape.backward(total);
    let by_param: Vec<Option<&ArrayD<R>>> = fwd
        .param_ids
        .iter()
        .map(|&id| grads[id].as_ref())
        .collect();
    adam.step(params, &by_param);

    Ok(LossReport {
        few_shot: few_value,
        seg: seg_value,
        align: align_value,
        total: total_value,
        few_shot_unaligned: few_unaligned,
    })
}

fn scalar<R: Real>(tape: &Tape<R>, id: NodeId) -> f64 {
    (*tape.value(id).iter().next().unwrap()).to_f64()
}

/// Fully supervised upper bound: extractor + segmentation head over all
/// classes, trained on base-institution training subjects with base and
/// novel masks.
pub fn train_supervised<R: Real>(
    dataset: &Dataset,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint<R>>,
) -> Result<TrainOutcome, TrainError> {
    if model_config.variant != Variant::Supervised {
        return Err(TrainError::Invalid(
            "train_supervised needs the supervised variant".into(),
        ));
    }
    let all_classes = dataset.manifest.classes.clone();
    if model_config.num_classes != all_classes.len() {
        return Err(TrainError::Invalid(format!(
            "supervised num_classes {} must equal the {} dataset classes",
            model_config.num_classes,
            all_classes.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let seed = train_config.seed;
    let pool = split.all_train_ids();
    if pool.is_empty() {
        return Err(TrainError::Invalid("empty training pool".into()));
    }

    let (mut params, mut adam, start_step) = match resume {
        Some(ckpt) => {
            crate::model::checkpoint::require_config(&ckpt.config, model_config)?;
            let adam = match ckpt.adam {
                Some(state) => Adam::resume(train_config.learning_rate, state),
                None => Adam::new(train_config.learning_rate, &ckpt.params),
            };
            (ckpt.params, adam, ckpt.step)
        }
        None => {
            let params = init_params::<R>(model_config, seed);
            let adam = Adam::new(train_config.learning_rate, &params);
            (params, adam, 0)
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if start_step == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        f.write_all(metrics_header().as_bytes())?;
        f
    } else {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    };
    let t0 = Instant::now();
    let mut last_report = LossReport {
        few_shot: f64::NAN,
        seg: None,
        align: None,
        total: f64::NAN,
        few_shot_unaligned: None,
    };

    for step in start_step + 1..=train_config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x50F7, step));
        let id = &pool[rng.random_range(0..pool.len())];
        let subject = dataset
            .subject(id)
            .ok_or_else(|| TrainError::Invalid(format!("unknown subject {id}")))?;
        let masks: Vec<MaskVolume> = all_classes
            .iter()
            .map(|c| subject.class_mask(c).expect("manifest classes present"))
            .collect();
        let (img, masks, _) = augment(&subject.image, &masks, &train_config.augment, &mut rng);
        let target = base_onehot::<R>(&masks, img.shape());

        let (mut tape, param_ids, seg) = forward_supervised(model_config, &params, &img)?;
        let loss = tape.multiclass_dice_fg(seg, target);
        let loss_value = scalar(&tape, loss);
        if !loss_value.is_finite() {
            return Err(TrainError::Divergence(step));
        }
        let grads = tape.backward(loss);
        let by_param: Vec<Option<&ArrayD<R>>> =
            param_ids.iter().map(|&id| grads[id].as_ref()).collect();
        adam.step(&mut params, &by_param);

        last_report = LossReport {
            few_shot: loss_value,
            seg: Some(loss_value),
            align: None,
            total: loss_value,
            few_shot_unaligned: None,
        };
        if step % train_config.log_every == 0 || step == train_config.steps {
            writeln!(
                metrics,
                "{step},{:.6},{:.6},,{:.6},,{:.3}",
                loss_value,
                loss_value,
                loss_value,
                t0.elapsed().as_secs_f64()
            )?;
        }
        if train_config.checkpoint_every > 0
            && (step % train_config.checkpoint_every == 0 || step == train_config.steps)
        {
            save_checkpoint(
                &out_dir.join("checkpoint.bin"),
                &Checkpoint {
                    config: model_config.clone(),
                    params: params.clone(),
                    adam: Some(adam.state.clone()),
                    step,
                    seed,
                    atlas_institution: None,
                },
            )?;
        }
    }

    let ckpt_path = out_dir.join("checkpoint.bin");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            config: model_config.clone(),
            params,
            adam: Some(adam.state.clone()),
            step: train_config.steps,
            seed,
            atlas_institution: None,
        },
    )?;
    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        metrics_path,
        atlas_institution: None,
        final_loss: last_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn dice_loss_trivial_values() {
        let a = Array3::from_shape_fn((4, 4, 2), |(x, _, _)| if x < 2 { 1.0 } else { 0.0 });
        let b = a.clone();
        assert!(dice_loss_value(&a, &b).unwrap() < 1e-4);
        let c = a.mapv(|v| 1.0 - v);
        assert!((dice_loss_value(&a, &c).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_hand_example() {
        // pred uniform 0.5, target half-ones on 2x1x1:
        // 1 - (2*0.5 + d) / (1 + 1 + d) ~= 0.5
        let pred = Array3::from_elem((2, 1, 1), 0.5f32);
        let mut target = Array3::zeros((2, 1, 1));
        target[(0, 0, 0)] = 1.0;
        let loss = dice_loss_value(&pred, &target).unwrap();
        assert!((loss - 0.5).abs() < 1e-4, "got {loss}");
    }

    #[test]
    fn dice_loss_shape_mismatch() {
        let a = Array3::<f32>::zeros((2, 2, 2));
        let b = Array3::<f32>::zeros((2, 2, 3));
        assert!(matches!(
            dice_loss_value(&a, &b),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn base_onehot_channels_sum_to_one() {
        let m1 = MaskVolume {
            data: Array3::from_shape_fn((2, 2, 2), |(x, _, _)| if x == 0 { 1.0 } else { 0.0 }),
            hard: true,
        };
        let m2 = MaskVolume {
            data: Array3::from_shape_fn((2, 2, 2), |(x, y, _)| {
                if x == 1 && y == 0 {
                    1.0
                } else {
                    0.0
                }
            }),
            hard: true,
        };
        let oh = base_onehot::<f64>(&[m1, m2], [2, 2, 2]);
        for v in 0..8 {
            let s: f64 = (0..3).map(|c| oh.as_slice().unwrap()[c * 8 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
