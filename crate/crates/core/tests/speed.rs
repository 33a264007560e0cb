//! Manual timing harness for calibrating training configs on the target
//! machine. Run with `cargo test -p protoseg3d --test speed -- --ignored --nocapture`.

use std::time::Instant;

use protoseg3d::episodes::make_splits;
use protoseg3d::model::{ModelConfig, Variant};
use protoseg3d::phantom::{generate_subject, Dataset, DatasetManifest, GenerationConfig, SubjectRecord, MANIFEST_MAGIC};
use protoseg3d::train::{train, TrainConfig};

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

#[test]
#[ignore]
fn time_training_step() {
    let gen = GenerationConfig {
        subjects_per_institution: 4,
        ..GenerationConfig::desk_default()
    };
    let t0 = Instant::now();
    let dataset = in_memory_dataset(&gen);
    eprintln!("dataset generation: {:.2}s", t0.elapsed().as_secs_f64());
    let split = make_splits(&dataset.manifest, "site_3", 1, 0).unwrap();

    for (label, widths, cf, ratios) in [
        ("tiny (4,8,16) cf8 r(.5,.5,.5)", vec![4usize, 8, 16], 8usize, [0.5, 0.5, 0.5]),
        ("small (6,12,24) cf8 r(.5,.5,.5)", vec![6, 12, 24], 8, [0.5, 0.5, 0.5]),
        ("small (6,12,24) cf8 r(.25,.25,.5)", vec![6, 12, 24], 8, [0.25, 0.25, 0.5]),
        ("desk (16,32,64) cf32 r(.25,.25,.5)", vec![16, 32, 64], 32, [0.25, 0.25, 0.5]),
    ] {
        for variant in [Variant::ThreeD, Variant::ThreeDSegAlign] {
            let mc = ModelConfig {
                variant,
                widths: widths.clone(),
                feat_channels: cf,
                window_ratios: ratios,
                ..ModelConfig::desk_default()
            };
            let tc = TrainConfig {
                steps: 10,
                checkpoint_every: 0,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let t0 = Instant::now();
            train::<f32>(&dataset, &split, &mc, &tc, dir.path(), None).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            eprintln!("{label} {variant}: {:.0} ms/step", dt / 10.0 * 1000.0);
        }
    }
}
