//! Training-loop contracts: loss definitions, optimization progress,
//! zero-weight equivalence, checkpoint resume, supervised overfitting, and
//! the alignment head actually leaving the identity.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use protoseg3d::episodes::{make_splits, AugmentRanges};
use protoseg3d::model::{
    forward_supervised, init_params, load_checkpoint, Atlas, ModelConfig, Variant,
};
use protoseg3d::nn::tape::Tape;
use protoseg3d::phantom::{
    generate_subject, Dataset, DatasetManifest, GenerationConfig, SubjectRecord, MANIFEST_MAGIC,
};
use protoseg3d::train::{align_loss, seg_loss, train, TrainConfig};

fn in_memory_dataset(gen: &GenerationConfig) -> Dataset {
    let mut subjects = Vec::new();
    let mut records = Vec::new();
    for i in 0..gen.institutions {
        for s in 0..gen.subjects_per_institution {
            let subj = generate_subject(gen, i, s).unwrap();
            records.push(SubjectRecord {
                id: subj.id.clone(),
                institution: subj.institution.clone(),
                dir: String::new(),
            });
            subjects.push(subj);
        }
    }
    let manifest = DatasetManifest {
        magic: MANIFEST_MAGIC.to_string(),
        seed: gen.seed,
        shape: gen.shape,
        spacing: gen.spacing,
        classes: gen.class_names(),
        institutions: gen.institution_names(),
        subjects: records,
    };
    Dataset::from_parts(manifest, subjects)
}

fn small_gen() -> GenerationConfig {
    GenerationConfig {
        shape: [32, 32, 8],
        institutions: 3,
        subjects_per_institution: 3,
        seed: 6,
        ..GenerationConfig::desk_default()
    }
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        widths: vec![4, 8],
        feat_channels: 8,
        window_ratios: [0.5, 0.5, 1.0],
        seg_hidden: 8,
        affine_channels: [4, 8],
        affine_hidden: 16,
        num_classes: if variant == Variant::Supervised { 8 } else { 6 },
        stem_pool: false,
        instance_norm: true,
    }
}

// ---------------------------------------------------------------------------
// Loss definitions
// ---------------------------------------------------------------------------

fn scalar(tape: &Tape<f64>, id: protoseg3d::nn::tape::NodeId) -> f64 {
    tape.value(id).iter().next().copied().unwrap()
}

#[test]
fn seg_loss_examples() {
    // 2 foreground classes on a 2x2x1 grid
    let mk_target = |flip: bool| {
        ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 1]), |ix| {
            let (c, x) = (ix[0], ix[1]);
            let fg = if flip { 1 - x } else { x }; // class 1 on column x==0/1
            if (c == 1 && fg == 0) || (c == 2 && fg == 1) {
                1.0
            } else if c == 0 {
                0.0
            } else {
                0.0
            }
        })
    };
    let t = mk_target(false);
    let wrong = mk_target(true);

    // perfect predictions on both terms: ~0
    let mut tape = Tape::<f64>::new();
    let pq = tape.leaf(t.clone());
    let ps = tape.leaf(t.clone());
    let loss = seg_loss(&mut tape, pq, t.clone(), ps, t.clone());
    assert!(scalar(&tape, loss) < 1e-4);

    // swapping the (pred, target) pairs leaves the value unchanged
    let mut tape = Tape::<f64>::new();
    let pq = tape.leaf(t.clone());
    let ps = tape.leaf(wrong.clone());
    let a = seg_loss(&mut tape, pq, t.clone(), ps, t.clone());
    let a = scalar(&tape, a);
    let mut tape = Tape::<f64>::new();
    let pq = tape.leaf(wrong.clone());
    let ps = tape.leaf(t.clone());
    let b = seg_loss(&mut tape, pq, t.clone(), ps, t.clone());
    let b = scalar(&tape, b);
    assert!((a - b).abs() < 1e-12, "seg loss must be symmetric in its two terms");

    // one perfect term plus one fully-wrong term: ~1 (mean over classes)
    assert!((a - 1.0).abs() < 1e-3, "got {a}");
}

#[test]
fn align_loss_examples_and_identity_consistency() {
    // atlas: an off-centre one-hot ellipsoid as class 1
    let shape = (8, 8, 8);
    let mut atlas_data = Array4::<f32>::zeros((2, 8, 8, 8));
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                let inside = ((x as f64 - 3.0).powi(2) / 4.0
                    + (y as f64 - 3.5).powi(2) / 4.0
                    + (z as f64 - 3.5).powi(2) / 4.0)
                    <= 1.0;
                atlas_data[(1, x, y, z)] = inside as u8 as f32;
                atlas_data[(0, x, y, z)] = 1.0 - inside as u8 as f32;
            }
        }
    }
    let atlas = Atlas {
        data: atlas_data.clone(),
        classes: vec!["a".into()],
    };
    let atlas_arr = ArrayD::from_shape_vec(
        IxDyn(&[2, 8, 8, 8]),
        atlas_data.iter().map(|&v| v as f64).collect(),
    )
    .unwrap();

    // warped predictions equal to the atlas: ~0
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(atlas_arr.clone());
    let q = tape.leaf(atlas_arr.clone());
    let l = align_loss(&mut tape, p, q, &atlas);
    assert!(scalar(&tape, l) < 1e-4);

    // a translated prediction scores worse than its atlas-registered warp
    let ident: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    // pull map x -> x + d moves content by -d: shift the atlas blob by +2
    // voxels in x, then register it back with the same pull map
    let two_vox = 2.0 * 2.0 / 7.0;
    let mut shift = ident.clone();
    shift[9] = -two_vox;
    let mut register = ident.clone();
    register[9] = two_vox;

    let mut tape = Tape::<f64>::new();
    let atlas_node = tape.leaf(atlas_arr.clone());
    let shift_node = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[12]), shift).unwrap());
    let translated = tape.warp_affine(atlas_node, shift_node);
    let reg_node = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[12]), register).unwrap());
    let registered = tape.warp_affine(translated, reg_node);
    let l_unaligned = align_loss(&mut tape, translated, translated, &atlas);
    let l_aligned = align_loss(&mut tape, registered, registered, &atlas);
    let (u, a) = (scalar(&tape, l_unaligned), scalar(&tape, l_aligned));
    assert!(
        a < u,
        "registration must reduce the alignment loss: aligned {a:.4} vs unaligned {u:.4}"
    );

    // with identity warps, the alignment loss equals the Dice loss of the
    // unwarped predictions against the atlas
    let mut tape = Tape::<f64>::new();
    let pred = tape.leaf(atlas_arr.mapv(|v| 0.25 + 0.5 * v));
    let idn = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[12]), ident.clone()).unwrap());
    let warped = tape.warp_affine(pred, idn);
    let via_warp = align_loss(&mut tape, warped, warped, &atlas);
    let direct = align_loss(&mut tape, pred, pred, &atlas);
    assert_eq!(scalar(&tape, via_warp), scalar(&tape, direct));
    let _ = shape;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[test]
fn fifty_steps_reduce_the_few_shot_loss() {
    let dataset = in_memory_dataset(&small_gen());
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let mc = small_model(Variant::ThreeD);
    let tc = TrainConfig {
        steps: 50,
        checkpoint_every: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &mc, &tc, dir.path(), None).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let few: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(few.len(), 50);
    assert!(few.iter().all(|v| v.is_finite()), "loss must stay finite");
    let head: f64 = few[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = few[40..].iter().sum::<f64>() / 10.0;
    assert!(
        tail < head,
        "moving average did not improve: first 10 = {head:.4}, last 10 = {tail:.4}"
    );
}

/// With zero-weighted auxiliary losses, the extractor follows exactly the
/// same trajectory as the plain 3d variant under the same seed.
#[test]
fn zero_weight_heads_do_not_perturb_the_extractor()
{
    let dataset = in_memory_dataset(&small_gen());
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let tc = TrainConfig {
        steps: 12,
        lambda_seg: 0.0,
        lambda_align: 0.0,
        checkpoint_every: 12,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &small_model(Variant::ThreeD), &tc, dir_a.path(), None).unwrap();
    train::<f32>(
        &dataset,
        &split,
        &small_model(Variant::ThreeDSeg),
        &tc,
        dir_b.path(),
        None,
    )
    .unwrap();
    let a = load_checkpoint::<f32>(&dir_a.path().join("checkpoint.bin")).unwrap();
    let b = load_checkpoint::<f32>(&dir_b.path().join("checkpoint.bin")).unwrap();
    for (name, pa) in a.params.iter() {
        let pb = b.params.get(name);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "extractor parameter {name} diverged under zero-weight heads"
            );
        }
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dataset = in_memory_dataset(&small_gen());
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let mc = small_model(Variant::ThreeDSeg);
    let full = TrainConfig {
        steps: 16,
        checkpoint_every: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let dir_full = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &mc, &full, dir_full.path(), None).unwrap();

    let half = TrainConfig { steps: 8, ..full.clone() };
    let dir_half = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &mc, &half, dir_half.path(), None).unwrap();
    let ckpt = load_checkpoint::<f32>(&dir_half.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.step, 8);
    let resumed = TrainConfig { steps: 16, ..full.clone() };
    train::<f32>(&dataset, &split, &mc, &resumed, dir_half.path(), Some(ckpt)).unwrap();

    let a = load_checkpoint::<f32>(&dir_full.path().join("checkpoint.bin")).unwrap();
    let b = load_checkpoint::<f32>(&dir_half.path().join("checkpoint.bin")).unwrap();
    for (name, pa) in a.params.iter() {
        assert_eq!(pa, b.params.get(name), "{name} differs after resume");
    }
    // the resumed metrics continue with identical losses
    let read_losses = |p: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
            .collect()
    };
    let full_rows = read_losses(dir_full.path());
    let resumed_rows = read_losses(dir_half.path());
    assert_eq!(full_rows.len(), 16);
    assert_eq!(resumed_rows.len(), 16);
    assert_eq!(full_rows[8..], resumed_rows[8..]);
}

#[test]
fn supervised_overfits_one_subject() {
    // one training subject (plus a second so the split is valid)
    let gen = GenerationConfig {
        shape: [32, 32, 8],
        institutions: 2,
        subjects_per_institution: 2,
        seed: 2,
        ..GenerationConfig::desk_default()
    };
    let dataset = in_memory_dataset(&gen);
    let split = make_splits(&dataset.manifest, "site_1", 1, 3).unwrap();
    let pool = split.all_train_ids();
    assert_eq!(pool.len(), 1, "3:1 split of 2 subjects leaves 1 in training");
    let mc = ModelConfig {
        widths: vec![8, 16],
        feat_channels: 16,
        seg_hidden: 16,
        ..small_model(Variant::Supervised)
    };
    let tc = TrainConfig {
        steps: 500,
        learning_rate: 2e-3,
        checkpoint_every: 0,
        seed: 8,
        augment: AugmentRanges::none(),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &mc, &tc, dir.path(), None).unwrap();
    let ckpt = load_checkpoint::<f32>(&dir.path().join("checkpoint.bin")).unwrap();

    let subject = dataset.subject(&pool[0]).unwrap();
    let (tape, _, seg) = forward_supervised(&mc, &ckpt.params, &subject.image).unwrap();
    let seg = tape.value(seg);
    // argmax prediction per class vs its own labels
    let (w, h, d) = subject.labels.dim();
    let mut mean_dice = 0.0;
    for class_idx in 1..=8usize {
        let (mut inter, mut p, mut t) = (0u64, 0u64, 0u64);
        for x in 0..w {
            for y in 0..h {
                for z in 0..d {
                    let mut best = 0usize;
                    let mut bv = seg[[0, x, y, z]];
                    for c in 1..9 {
                        if seg[[c, x, y, z]] > bv {
                            bv = seg[[c, x, y, z]];
                            best = c;
                        }
                    }
                    let pv = best == class_idx;
                    let tv = subject.labels[(x, y, z)] as usize == class_idx;
                    inter += (pv && tv) as u64;
                    p += pv as u64;
                    t += tv as u64;
                }
            }
        }
        mean_dice += 2.0 * inter as f64 / (p + t).max(1) as f64 / 8.0;
    }
    assert!(
        mean_dice > 0.8,
        "supervised overfit reached only mean dice {mean_dice:.3}"
    );
}

/// Training the alignment variant on data with a known institution offset
/// moves the predicted transforms off the identity and improves the atlas
/// overlap of the warped base-class predictions.
#[test]
fn alignment_training_improves_atlas_overlap() {
    let gen = GenerationConfig {
        shape: [32, 32, 8],
        institutions: 3,
        subjects_per_institution: 3,
        institution_rotation_deg: 10.0,
        institution_translation_frac: 0.10,
        institution_log_scale: 0.08,
        seed: 14,
        ..GenerationConfig::desk_default()
    };
    let dataset = in_memory_dataset(&gen);
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let mc = small_model(Variant::ThreeDSegAlign);
    let tc = TrainConfig {
        steps: 400,
        checkpoint_every: 0,
        seed: 15,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train::<f32>(&dataset, &split, &mc, &tc, dir.path(), None).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let align_col: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    let head: f64 = align_col[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = align_col[align_col.len() - 20..].iter().sum::<f64>() / 20.0;
    // the alignment loss is (2 - warped atlas-overlap dice of both subjects),
    // so a lower value means strictly better overlap after warping
    assert!(
        tail < head,
        "atlas overlap did not improve: first {head:.4}, last {tail:.4}"
    );
}

#[test]
fn divergence_is_reported() {
    let dataset = in_memory_dataset(&small_gen());
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let mc = small_model(Variant::ThreeD);
    let tc = TrainConfig {
        steps: 3,
        learning_rate: f64::NAN,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    // NaN learning rate poisons the parameters after the first update; the
    // second step's loss is non-finite and must surface as Divergence
    let got = train::<f32>(&dataset, &split, &mc, &tc, dir.path(), None);
    assert!(
        matches!(got, Err(protoseg3d::TrainError::Divergence(_))),
        "expected divergence error"
    );
}

#[test]
fn untrained_model_scores_low_dice() {
    let dataset = in_memory_dataset(&small_gen());
    let split = make_splits(&dataset.manifest, "site_2", 1, 3).unwrap();
    let mc = small_model(Variant::ThreeD);
    let ckpt = protoseg3d::model::Checkpoint {
        config: mc.clone(),
        params: init_params::<f32>(&mc, 123),
        adam: None,
        step: 0,
        seed: 123,
        atlas_institution: None,
    };
    let rows = protoseg3d::evaluate(&ckpt, &dataset, &split, 0.5, None).unwrap();
    let mean = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
    assert!(mean < 0.2, "untrained model mean dice {mean:.3} suspiciously high");
}
