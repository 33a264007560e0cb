//! Dataset generator contracts: determinism, disjointness, volume-fraction
//! bounds, institution-shift behaviour, and the subject file format.

use std::fs;

use protoseg3d::phantom::{
    generate_dataset, generate_subject, load_dataset, load_subject, save_subject,
    GenerationConfig, CANONICAL_CLASSES,
};

fn small_config() -> GenerationConfig {
    GenerationConfig {
        shape: [48, 48, 12],
        institutions: 2,
        subjects_per_institution: 3,
        seed: 7,
        ..GenerationConfig::desk_default()
    }
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let cfg = small_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let man_a = generate_dataset(&cfg, dir_a.path()).unwrap();
    let man_b = generate_dataset(&cfg, dir_b.path()).unwrap();
    assert_eq!(man_a.subjects.len(), 6);
    assert_eq!(man_a, man_b);
    assert_eq!(
        fs::read(dir_a.path().join("manifest.json")).unwrap(),
        fs::read(dir_b.path().join("manifest.json")).unwrap()
    );
    for rec in &man_a.subjects {
        for file in ["image.raw", "labels.raw", "meta.json"] {
            assert_eq!(
                fs::read(dir_a.path().join(&rec.dir).join(file)).unwrap(),
                fs::read(dir_b.path().join(&rec.dir).join(file)).unwrap(),
                "{}/{file} differs between runs",
                rec.id
            );
        }
    }
    // and the loaded dataset round-trips the in-memory generation
    let ds = load_dataset(dir_a.path()).unwrap();
    let direct = generate_subject(&cfg, 0, 0).unwrap();
    assert_eq!(ds.subject("site_0_subj_0").unwrap(), &direct);
}

/// Per-class centroids in voxel units for one subject.
fn centroids(s: &protoseg3d::LabeledSubject) -> Vec<[f64; 3]> {
    let n_classes = s.classes.len();
    let mut sums = vec![[0.0f64; 3]; n_classes];
    let mut counts = vec![0usize; n_classes];
    let (w, h, d) = s.labels.dim();
    for x in 0..w {
        for y in 0..h {
            for z in 0..d {
                let l = s.labels[(x, y, z)] as usize;
                if l > 0 {
                    sums[l - 1][0] += x as f64;
                    sums[l - 1][1] += y as f64;
                    sums[l - 1][2] += z as f64;
                    counts[l - 1] += 1;
                }
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
        .collect()
}

fn mean_cross_institution_displacement(cfg: &GenerationConfig) -> f64 {
    // institution-mean centroid per class, then mean pairwise distance
    let mut inst_means: Vec<Vec<[f64; 3]>> = Vec::new();
    for inst in 0..cfg.institutions {
        let mut acc = vec![[0.0f64; 3]; cfg.classes];
        for subj in 0..cfg.subjects_per_institution {
            let s = generate_subject(cfg, inst, subj).unwrap();
            for (a, c) in acc.iter_mut().zip(centroids(&s)) {
                for k in 0..3 {
                    a[k] += c[k] / cfg.subjects_per_institution as f64;
                }
            }
        }
        inst_means.push(acc);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..inst_means.len() {
        for j in i + 1..inst_means.len() {
            for c in 0..cfg.classes {
                let (a, b) = (inst_means[i][c], inst_means[j][c]);
                total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                    .sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

#[test]
fn identity_institution_offsets_leave_only_subject_jitter() {
    let cfg = GenerationConfig {
        shape: [48, 48, 12],
        institutions: 3,
        subjects_per_institution: 4,
        institution_rotation_deg: 0.0,
        institution_translation_frac: 0.0,
        institution_log_scale: 0.0,
        seed: 5,
        ..GenerationConfig::desk_default()
    };
    let disp = mean_cross_institution_displacement(&cfg);
    // per-subject centre jitter is +-subject_jitter in normalized units
    let jitter_vox = cfg.subject_jitter * cfg.shape[0] as f64 / 2.0;
    assert!(
        disp < jitter_vox,
        "cross-institution displacement {disp:.3} vox exceeds jitter bound {jitter_vox:.3}"
    );
}

#[test]
fn institution_shift_is_monotone_in_magnitude() {
    let mut previous = -1.0f64;
    for mag in [0.0, 1.0, 2.5] {
        let cfg = GenerationConfig {
            shape: [48, 48, 12],
            institutions: 3,
            subjects_per_institution: 3,
            institution_rotation_deg: 6.0 * mag,
            institution_translation_frac: 0.04 * mag,
            institution_log_scale: 0.05 * mag,
            seed: 5,
            ..GenerationConfig::desk_default()
        };
        let disp = mean_cross_institution_displacement(&cfg);
        assert!(
            disp > previous,
            "displacement {disp:.3} not increasing at magnitude {mag}"
        );
        previous = disp;
    }
}

#[test]
fn class_volume_fractions_within_bounds() {
    let cfg = GenerationConfig::desk_default();
    let total = (cfg.shape[0] * cfg.shape[1] * cfg.shape[2]) as f64;
    for (inst, subj) in [(0, 0), (1, 1), (2, 0), (3, 2)] {
        let s = generate_subject(&cfg, inst, subj).unwrap();
        let mut counts = vec![0usize; 8];
        for &l in s.labels.iter() {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        for (ci, &c) in counts.iter().enumerate() {
            let frac = c as f64 / total;
            assert!(
                (0.001..=0.20).contains(&frac),
                "subject site_{inst}_subj_{subj} class {} volume fraction {frac:.4} outside [0.1%, 20%]",
                CANONICAL_CLASSES[ci]
            );
        }
    }
}

#[test]
fn subject_io_round_trips_bit_exactly() {
    let cfg = small_config();
    let s = generate_subject(&cfg, 1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    let loaded = load_subject(dir.path()).unwrap();
    assert_eq!(s, loaded);
    // bitwise equality of the image payload, not merely approximate
    for (&a, &b) in s.image.data.iter().zip(loaded.image.data.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn truncated_payload_is_a_format_error() {
    let cfg = small_config();
    let s = generate_subject(&cfg, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    let img_path = dir.path().join("image.raw");
    let bytes = fs::read(&img_path).unwrap();
    fs::write(&img_path, &bytes[..bytes.len() - 4]).unwrap();
    match load_subject(dir.path()) {
        Err(protoseg3d::PhantomError::Format(msg)) => {
            assert!(msg.contains("payload"), "unexpected message: {msg}")
        }
        other => panic!("expected FormatError, got {other:?}"),
    }
}

#[test]
fn header_payload_shape_mismatch_is_a_format_error() {
    let cfg = small_config();
    let s = generate_subject(&cfg, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    // header claims one more z slice than the payload holds
    let meta_path = dir.path().join("meta.json");
    let meta = fs::read_to_string(&meta_path).unwrap();
    let meta = meta.replace("[\n    48,\n    48,\n    12\n  ]", "[\n    48,\n    48,\n    13\n  ]");
    assert!(meta.contains("13"), "meta edit failed");
    fs::write(&meta_path, meta).unwrap();
    assert!(matches!(
        load_subject(dir.path()),
        Err(protoseg3d::PhantomError::Format(_))
    ));
}

#[test]
fn bad_magic_is_a_format_error() {
    let cfg = small_config();
    let s = generate_subject(&cfg, 0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    let meta_path = dir.path().join("meta.json");
    let meta = fs::read_to_string(&meta_path)
        .unwrap()
        .replace("PS3D-subject", "bogus");
    fs::write(&meta_path, meta).unwrap();
    assert!(matches!(
        load_subject(dir.path()),
        Err(protoseg3d::PhantomError::Format(_))
    ));
}
