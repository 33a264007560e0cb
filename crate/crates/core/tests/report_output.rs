//! Report rendering: structure of the markdown, the missing-fold note, and
//! pixel-level agreement of overlays with stored predictions.

use protoseg3d::eval::{report, EpisodeResult};
use protoseg3d::phantom::{generate_dataset, load_dataset, GenerationConfig};

fn tiny_dataset(dir: &std::path::Path) -> protoseg3d::phantom::Dataset {
    let cfg = GenerationConfig {
        shape: [24, 24, 8],
        institutions: 2,
        subjects_per_institution: 2,
        seed: 9,
        ..GenerationConfig::desk_default()
    };
    generate_dataset(&cfg, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn row(class: &str, fold: u8, query: &str, support: &str, dice: f64) -> EpisodeResult {
    EpisodeResult {
        variant: "3d".into(),
        fold,
        class: class.into(),
        query_id: query.into(),
        query_institution: "site_1".into(),
        support_id: support.into(),
        support_institution: "site_0".into(),
        scenario: "base".into(),
        dice,
    }
}

#[test]
fn report_structure_and_missing_fold_note() {
    let data_dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(data_dir.path());
    let rows = vec![
        row("bladder", 1, "site_1_subj_0", "site_0_subj_0", 0.61),
        row("transition_zone", 1, "site_1_subj_0", "site_0_subj_1", 0.33),
        row("bone", 2, "site_1_subj_1", "site_0_subj_0", 0.72),
    ];
    let out = tempfile::tempdir().unwrap();
    report(&rows, Some(&dataset), None, out.path()).unwrap();
    let md = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    assert!(md.contains("### Fold 1"));
    assert!(md.contains("### Fold 2"));
    assert!(md.contains("bladder"));
    assert!(
        md.contains("No results recorded for this fold"),
        "folds 3 and 4 are absent and must be noted"
    );
    assert!(out.path().join("scenarios.svg").exists());

    // empty results are rejected rather than silently producing a report
    assert!(report(&[], Some(&dataset), None, out.path()).is_err());
}

#[test]
fn overlay_pixels_match_stored_prediction() {
    let data_dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(data_dir.path());
    let subject = dataset.subject("site_1_subj_0").unwrap();
    let [w, h, d] = subject.shape();

    // fabricate a stored prediction: a box in the x/y centre of the mid slice
    let mut pred = vec![0u8; w * h * d];
    let z_mid = d / 2;
    for x in 8..14 {
        for y in 6..12 {
            pred[(x * h + y) * d + z_mid] = 1;
        }
    }
    let pred_dir = tempfile::tempdir().unwrap();
    std::fs::write(
        pred_dir
            .path()
            .join("bladder__site_1_subj_0__site_0_subj_0.raw"),
        &pred,
    )
    .unwrap();

    let rows = vec![row("bladder", 1, "site_1_subj_0", "site_0_subj_0", 0.5)];
    let out = tempfile::tempdir().unwrap();
    report(&rows, Some(&dataset), Some(pred_dir.path()), out.path()).unwrap();

    let png = image::open(out.path().join("overlay_0.png")).unwrap().to_rgb8();
    assert_eq!(png.width(), w as u32 * 4);
    // spot-check three coordinates: predicted voxels render with a saturated
    // red channel, a non-predicted voxel does not
    for (x, y, expect_pred) in [(9usize, 7usize, true), (13, 11, true), (2, 2, false)] {
        let px = png.get_pixel(x as u32 * 4 + 1, y as u32 * 4 + 2);
        let is_pred = pred[(x * h + y) * d + z_mid] != 0;
        assert_eq!(is_pred, expect_pred, "test fixture mismatch");
        if expect_pred {
            assert_eq!(px[0], 255, "voxel ({x},{y}) should be painted red");
        } else {
            assert!(px[0] < 255, "voxel ({x},{y}) should not be painted red");
        }
    }
}
