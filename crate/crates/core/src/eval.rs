//! Institution-stratified evaluation: per-episode Dice of thresholded
//! predictions, scenario summaries (all / base / novel support
//! institutions), a paired permutation test, parameter counting, and
//! report/figure emission.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{enumerate_eval_episodes, EpisodeError, SplitSpec, SupportScenario};
use crate::geom::MaskVolume;
use crate::model::{forward_episode, Checkpoint, ModelConfig, ModelError, Variant};
use crate::phantom::{Dataset, PhantomError};
use crate::train::{prepare_episode, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("no results to summarize")]
    EmptyResults,
    #[error("episode keys do not match: {0}")]
    KeyMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Dice score
// ---------------------------------------------------------------------------

/// Binary Dice overlap `2|P n T| / (|P| + |T|)` of two hard masks; both
/// empty counts as 1.0.
pub fn dice_score(pred: &MaskVolume, target: &MaskVolume) -> Result<f64, EvalError> {
    if pred.shape() != target.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut t = 0u64;
    for (&a, &b) in pred.data.iter().zip(target.data.iter()) {
        let a = a != 0.0;
        let b = b != 0.0;
        inter += (a && b) as u64;
        p += a as u64;
        t += b as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Hard-threshold a soft prediction.
pub fn threshold_mask(soft: &MaskVolume, threshold: f32) -> MaskVolume {
    MaskVolume {
        data: soft
            .data
            .mapv(|v| if v > threshold { 1.0f32 } else { 0.0 }),
        hard: true,
    }
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpisodeResult {
    pub variant: String,
    pub fold: u8,
    pub class: String,
    pub query_id: String,
    pub query_institution: String,
    pub support_id: String,
    pub support_institution: String,
    pub scenario: String,
    pub dice: f64,
}

/// Run the frozen checkpoint over every enumerated evaluation episode.
/// Episodes whose support yields no usable prototype score 0 with a warning.
/// When `predictions_dir` is given, each hard prediction is stored as one
/// u8 voxel per byte in row-major order.
pub fn evaluate(
    ckpt: &Checkpoint<f32>,
    dataset: &Dataset,
    split: &SplitSpec,
    threshold: f32,
    predictions_dir: Option<&Path>,
) -> Result<Vec<EpisodeResult>, EvalError> {
    let config = &ckpt.config;
    let specs = enumerate_eval_episodes(split, &dataset.manifest)?;
    if let Some(dir) = predictions_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let sup_ch = if config.variant == Variant::Supervised {
            Some(
                dataset
                    .manifest
                    .classes
                    .iter()
                    .position(|c| c == &spec.class)
                    .ok_or_else(|| EvalError::ConfigMismatch(format!("class {}", spec.class)))?
                    + 1,
            )
        } else {
            None
        };
        let (episode, _, _) =
            prepare_episode::<f32>(dataset, spec, &split.base_classes, None, sup_ch)?;
        let gt = episode
            .query_mask
            .clone()
            .expect("evaluation episodes carry ground truth");
        let (dice, pred) = match forward_episode(config, &ckpt.params, &episode) {
            Ok(fwd) => {
                let hard = threshold_mask(&fwd.prediction, threshold);
                (dice_score(&hard, &gt)?, Some(hard))
            }
            Err(ModelError::NoValidPrototype(kind)) => {
                eprintln!(
                    "warning: no {kind} prototype for class {} support {}; scoring dice 0",
                    spec.class, spec.support_id
                );
                (0.0, None)
            }
            Err(e) => return Err(e.into()),
        };
        if let (Some(dir), Some(pred)) = (predictions_dir, pred) {
            let name = format!("{}__{}__{}.raw", spec.class, spec.query_id, spec.support_id);
            let bytes: Vec<u8> = pred.data.iter().map(|&v| (v != 0.0) as u8).collect();
            std::fs::write(dir.join(name), bytes)?;
        }
        rows.push(EpisodeResult {
            variant: config.variant.to_string(),
            fold: split.fold,
            class: spec.class.clone(),
            query_id: spec.query_id.clone(),
            query_institution: spec.query_institution.clone(),
            support_id: spec.support_id.clone(),
            support_institution: spec.support_institution.clone(),
            scenario: match spec.scenario {
                SupportScenario::Base => "base".into(),
                SupportScenario::Novel => "novel".into(),
            },
            dice,
        });
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[EpisodeResult]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(RowOut::from(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-precision serialization so repeated runs are byte-identical.
#[derive(Serialize)]
struct RowOut<'a> {
    variant: &'a str,
    fold: u8,
    class: &'a str,
    query_id: &'a str,
    query_institution: &'a str,
    support_id: &'a str,
    support_institution: &'a str,
    scenario: &'a str,
    dice: String,
}

impl<'a> From<&'a EpisodeResult> for RowOut<'a> {
    fn from(r: &'a EpisodeResult) -> Self {
        Self {
            variant: &r.variant,
            fold: r.fold,
            class: &r.class,
            query_id: &r.query_id,
            query_institution: &r.query_institution,
            support_id: &r.support_id,
            support_institution: &r.support_institution,
            scenario: &r.scenario,
            dice: format!("{:.6}", r.dice),
        }
    }
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EpisodeResult>, EvalError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<EpisodeResult>() {
        rows.push(rec?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ScenarioSummary {
    pub variant: String,
    pub scenario: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub per_class: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FoldClassRow {
    pub variant: String,
    pub fold: u8,
    pub class: String,
    pub scenario: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub scenarios: Vec<ScenarioSummary>,
    pub fold_table: Vec<FoldClassRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group results by (variant, scenario) and (variant, fold, class,
/// scenario). The `all` scenario is the union of `base` and `novel`.
pub fn summarize(results: &[EpisodeResult]) -> Result<Summary, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut variants: Vec<String> = results.iter().map(|r| r.variant.clone()).collect();
    variants.sort();
    variants.dedup();

    let mut scenarios = Vec::new();
    let mut fold_table = Vec::new();
    for variant in &variants {
        let of_variant: Vec<&EpisodeResult> =
            results.iter().filter(|r| &r.variant == variant).collect();
        for scenario in ["all", "base", "novel"] {
            let rows: Vec<&&EpisodeResult> = of_variant
                .iter()
                .filter(|r| scenario == "all" || r.scenario == scenario)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let dices: Vec<f64> = rows.iter().map(|r| r.dice).collect();
            let (mean, std) = mean_std(&dices);
            let mut per_class = BTreeMap::new();
            let mut classes: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
            classes.sort();
            classes.dedup();
            for class in classes {
                let c: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.class == class)
                    .map(|r| r.dice)
                    .collect();
                per_class.insert(class, mean_std(&c).0);
            }
            scenarios.push(ScenarioSummary {
                variant: variant.clone(),
                scenario: scenario.into(),
                mean,
                std,
                count: rows.len(),
                per_class,
            });
        }
        let mut folds: Vec<u8> = of_variant.iter().map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        for fold in folds {
            let mut classes: Vec<String> = of_variant
                .iter()
                .filter(|r| r.fold == fold)
                .map(|r| r.class.clone())
                .collect();
            classes.sort();
            classes.dedup();
            for class in classes {
                for scenario in ["all", "base", "novel"] {
                    let dices: Vec<f64> = of_variant
                        .iter()
                        .filter(|r| {
                            r.fold == fold
                                && r.class == class
                                && (scenario == "all" || r.scenario == scenario)
                        })
                        .map(|r| r.dice)
                        .collect();
                    if dices.is_empty() {
                        continue;
                    }
                    fold_table.push(FoldClassRow {
                        variant: variant.clone(),
                        fold,
                        class: class.clone(),
                        scenario: scenario.into(),
                        mean: mean_std(&dices).0,
                        count: dices.len(),
                    });
                }
            }
        }
    }
    Ok(Summary {
        scenarios,
        fold_table,
    })
}

/// Human-readable table of scenario means.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<8} {:>8} {:>8} {:>7}\n",
        "variant", "s_ins", "mean", "std", "n"
    ));
    for s in &summary.scenarios {
        out.push_str(&format!(
            "{:<14} {:<8} {:>8.4} {:>8.4} {:>7}\n",
            s.variant, s.scenario, s.mean, s.std, s.count
        ));
    }
    out
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant", "scenario", "mean", "std", "count",
    ])?;
    for s in &summary.scenarios {
        w.write_record([
            s.variant.clone(),
            s.scenario.clone(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
            s.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Paired permutation test
// ---------------------------------------------------------------------------

pub const PERMUTATION_RESAMPLES: usize = 10_000;
pub const PERMUTATION_SEED: u64 = 0x9E7;

fn episode_key(r: &EpisodeResult) -> (u8, String, String, String, String) {
    (
        r.fold,
        r.class.clone(),
        r.query_id.clone(),
        r.support_id.clone(),
        r.support_institution.clone(),
    )
}

/// Pair two result sets by episode identity and return the per-episode Dice
/// differences `a - b`.
pub fn paired_dice_diffs(
    a: &[EpisodeResult],
    b: &[EpisodeResult],
) -> Result<Vec<f64>, EvalError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(EvalError::KeyMismatch(format!(
            "result lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut bmap: BTreeMap<_, f64> = BTreeMap::new();
    for r in b {
        if bmap.insert(episode_key(r), r.dice).is_some() {
            return Err(EvalError::KeyMismatch("duplicate episode key".into()));
        }
    }
    let mut diffs = Vec::with_capacity(a.len());
    for r in a {
        let k = episode_key(r);
        let other = bmap.remove(&k).ok_or_else(|| {
            EvalError::KeyMismatch(format!("episode {k:?} missing from second result set"))
        })?;
        diffs.push(r.dice - other);
    }
    Ok(diffs)
}

/// Two-sided paired permutation test (sign flips of per-episode Dice
/// differences, 10,000 resamples, fixed seed). Returns a p-value in (0, 1].
pub fn paired_significance(
    a: &[EpisodeResult],
    b: &[EpisodeResult],
) -> Result<f64, EvalError> {
    Ok(permutation_pvalue(&paired_dice_diffs(a, b)?))
}

/// Sign-flip permutation p-value of the mean of paired differences
/// (two-sided, fixed seed and resample count).
pub fn permutation_pvalue(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
    let mut at_least = 0usize;
    for _ in 0..PERMUTATION_RESAMPLES {
        let mut s = 0.0;
        for &d in diffs {
            if rng.random::<bool>() {
                s += d;
            } else {
                s -= d;
            }
        }
        if (s / n).abs() >= observed {
            at_least += 1;
        }
    }
    (1 + at_least) as f64 / (1 + PERMUTATION_RESAMPLES) as f64
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

/// Trainable parameter counts per component plus the total.
pub fn count_parameters(config: &ModelConfig) -> (Vec<(String, usize)>, usize) {
    let params = crate::model::init_params::<f32>(config, 0);
    let per = params.component_counts();
    let total = params.total_len();
    debug_assert_eq!(total, crate::model::parameter_count(config));
    (per, total)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Render a markdown report (per-fold tables, scenario chart, example
/// overlays) from recorded artifacts only: a results CSV, optional stored
/// predictions, and the dataset for images and ground truth.
pub fn report(
    results: &[EpisodeResult],
    dataset: Option<&Dataset>,
    predictions_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<(), EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    std::fs::create_dir_all(out_dir)?;
    let summary = summarize(results)?;
    let mut md = String::new();
    md.push_str("# Evaluation report\n\n");

    md.push_str("## Scenario summary\n\n");
    md.push_str("| variant | s_ins | mean dice | std | episodes |\n");
    md.push_str("|---|---|---|---|---|\n");
    for s in &summary.scenarios {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {} |\n",
            s.variant, s.scenario, s.mean, s.std, s.count
        ));
    }
    md.push('\n');

    let chart = scenario_chart_svg(&summary);
    std::fs::write(out_dir.join("scenarios.svg"), chart)?;
    md.push_str("![scenario means](scenarios.svg)\n\n");

    let mut folds_present: Vec<u8> = results.iter().map(|r| r.fold).collect();
    folds_present.sort_unstable();
    folds_present.dedup();
    md.push_str("## Per-fold results\n\n");
    for fold in 1..=4u8 {
        if !folds_present.contains(&fold) {
            md.push_str(&format!("### Fold {fold}\n\nNo results recorded for this fold.\n\n"));
            continue;
        }
        md.push_str(&format!("### Fold {fold}\n\n"));
        md.push_str("| variant | class | s_ins | mean dice | episodes |\n");
        md.push_str("|---|---|---|---|---|\n");
        for row in summary.fold_table.iter().filter(|r| r.fold == fold) {
            md.push_str(&format!(
                "| {} | {} | {} | {:.4} | {} |\n",
                row.variant, row.class, row.scenario, row.mean, row.count
            ));
        }
        md.push('\n');
    }

    if let (Some(dataset), Some(pred_dir)) = (dataset, predictions_dir) {
        md.push_str("## Example mid-slice overlays\n\n");
        md.push_str("Ground truth in green, prediction in red.\n\n");
        let mut made = 0;
        for r in results {
            if made >= 3 {
                break;
            }
            let name = format!("{}__{}__{}", r.class, r.query_id, r.support_id);
            let raw = pred_dir.join(format!("{name}.raw"));
            if !raw.exists() {
                continue;
            }
            if let Some(subject) = dataset.subject(&r.query_id) {
                let png = format!("overlay_{made}.png");
                write_overlay(
                    subject,
                    &r.class,
                    &raw,
                    &out_dir.join(&png),
                )?;
                md.push_str(&format!(
                    "![{name}]({png})\n*{}: query {} / support {} (dice {:.3})*\n\n",
                    r.class, r.query_id, r.support_id, r.dice
                ));
                made += 1;
            }
        }
        if made == 0 {
            md.push_str("No stored predictions found.\n\n");
        }
    }

    std::fs::write(out_dir.join("report.md"), md)?;
    Ok(())
}

fn scenario_chart_svg(summary: &Summary) -> String {
    let bars: Vec<&ScenarioSummary> = summary.scenarios.iter().collect();
    let bw = 40;
    let gap = 18;
    let width = (bars.len() * (bw + gap) + gap).max(200);
    let height = 260;
    let plot_h = 200.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, s) in bars.iter().enumerate() {
        let x = gap + i * (bw + gap);
        let h = (s.mean.clamp(0.0, 1.0) * plot_h) as usize;
        let y = 20 + (plot_h as usize - h);
        let color = match s.scenario.as_str() {
            "all" => "#4878d0",
            "base" => "#ee854a",
            _ => "#6acc64",
        };
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{bw}\" height=\"{h}\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"235\" font-size=\"9\" text-anchor=\"middle\">{} {}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{:.2}</text>\n",
            x + bw / 2,
            s.variant,
            s.scenario,
            x + bw / 2,
            y.saturating_sub(4),
            s.mean
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Upscaled (4x) axial mid-slice with the ground truth painted green and the
/// stored prediction painted red.
fn write_overlay(
    subject: &crate::phantom::LabeledSubject,
    class: &str,
    prediction_raw: &Path,
    out_png: &Path,
) -> Result<(), EvalError> {
    let [w, h, d] = subject.shape();
    let bytes = std::fs::read(prediction_raw)?;
    if bytes.len() != w * h * d {
        return Err(EvalError::ShapeMismatch(format!(
            "prediction payload {} bytes, volume needs {}",
            bytes.len(),
            w * h * d
        )));
    }
    let pred = Array3::from_shape_vec((w, h, d), bytes).expect("length checked");
    let gt = subject
        .class_mask(class)
        .ok_or_else(|| EvalError::ConfigMismatch(format!("class {class}")))?;
    let z = d / 2;
    let scale = 4u32;
    let mut img = image::RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let x = (px / scale) as usize;
        let y = (py / scale) as usize;
        let gray = (subject.image.data[(x, y, z)].clamp(0.0, 1.0) * 255.0) as u8;
        let mut rgb = [gray, gray, gray];
        if gt.data[(x, y, z)] != 0.0 {
            rgb[1] = 255;
        }
        if pred[(x, y, z)] != 0 {
            rgb[0] = 255;
        }
        *pixel = image::Rgb(rgb);
    }
    img.save(out_png)
        .map_err(|e| EvalError::ConfigMismatch(format!("png encode: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn hard(data: Array3<f32>) -> MaskVolume {
        MaskVolume { data, hard: true }
    }

    #[test]
    fn dice_score_basics() {
        let a = hard(Array3::from_shape_fn((4, 2, 1), |(x, _, _)| {
            if x < 2 { 1.0 } else { 0.0 }
        }));
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = hard(a.data.mapv(|v| 1.0 - v));
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let empty = hard(Array3::zeros((4, 2, 1)));
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn dice_score_counting_oracle() {
        // |P| = |T| = 8, overlap 4 -> 2*4 / 16 = 0.5
        let mut p = Array3::<f32>::zeros((4, 4, 1));
        let mut t = Array3::<f32>::zeros((4, 4, 1));
        for i in 0..8 {
            p[(i / 4, i % 4, 0)] = 1.0;
        }
        for i in 4..12 {
            t[(i / 4, i % 4, 0)] = 1.0;
        }
        assert_eq!(dice_score(&hard(p), &hard(t)).unwrap(), 0.5);
    }

    #[test]
    fn dice_is_symmetric_and_matches_loss_on_hard_masks() {
        let a = hard(Array3::from_shape_fn((5, 3, 2), |(x, y, _)| {
            if (x + y) % 3 == 0 { 1.0 } else { 0.0 }
        }));
        let b = hard(Array3::from_shape_fn((5, 3, 2), |(x, y, z)| {
            if (x + 2 * y + z) % 4 == 0 { 1.0 } else { 0.0 }
        }));
        let d_ab = dice_score(&a, &b).unwrap();
        let d_ba = dice_score(&b, &a).unwrap();
        assert_eq!(d_ab, d_ba);
        let loss = crate::train::dice_loss_value(&a.data, &b.data).unwrap();
        assert!((d_ab - (1.0 - loss)).abs() < 1e-4);
    }

    fn result(variant: &str, class: &str, q: &str, s: &str, scen: &str, dice: f64) -> EpisodeResult {
        EpisodeResult {
            variant: variant.into(),
            fold: 1,
            class: class.into(),
            query_id: q.into(),
            query_institution: "site_3".into(),
            support_id: s.into(),
            support_institution: if scen == "novel" { "site_3" } else { "site_0" }.into(),
            scenario: scen.into(),
            dice,
        }
    }

    #[test]
    fn summarize_single_episode_and_partition() {
        let rows = vec![
            result("3d", "bladder", "q0", "s0", "base", 0.5),
            result("3d", "bladder", "q0", "s1", "novel", 0.7),
        ];
        let s = summarize(&rows).unwrap();
        let all = s
            .scenarios
            .iter()
            .find(|x| x.scenario == "all")
            .unwrap();
        let base = s
            .scenarios
            .iter()
            .find(|x| x.scenario == "base")
            .unwrap();
        let novel = s
            .scenarios
            .iter()
            .find(|x| x.scenario == "novel")
            .unwrap();
        assert_eq!(all.count, base.count + novel.count);
        assert_eq!(base.count, 1);
        assert!((base.mean - 0.5).abs() < 1e-12);
        assert_eq!(base.std, 0.0);
        assert!((all.mean - 0.6).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summarize_known_group_means() {
        let rows = vec![
            result("3d", "bladder", "q0", "s0", "base", 0.2),
            result("3d", "bladder", "q1", "s0", "base", 0.4),
            result("3d", "transition_zone", "q0", "s0", "base", 0.6),
            result("3d", "transition_zone", "q1", "s0", "base", 0.8),
        ];
        let s = summarize(&rows).unwrap();
        let all = s.scenarios.iter().find(|x| x.scenario == "all").unwrap();
        assert!((all.mean - 0.5).abs() < 1e-12);
        assert!((all.per_class["bladder"] - 0.3).abs() < 1e-12);
        assert!((all.per_class["transition_zone"] - 0.7).abs() < 1e-12);
        let row = s
            .fold_table
            .iter()
            .find(|r| r.class == "bladder" && r.scenario == "all")
            .unwrap();
        assert!((row.mean - 0.3).abs() < 1e-12);
        assert_eq!(row.count, 2);
    }

    #[test]
    fn permutation_test_identity_and_shift() {
        let a: Vec<EpisodeResult> = (0..50)
            .map(|i| result("a", "bladder", &format!("q{i}"), "s0", "base", 0.4 + 0.001 * i as f64))
            .collect();
        // identical inputs: exactly 1.0
        assert_eq!(paired_significance(&a, &a).unwrap(), 1.0);
        // constant +0.2 shift: tiny p
        let mut b = a.clone();
        for r in &mut b {
            r.dice += 0.2;
        }
        let p = paired_significance(&b, &a).unwrap();
        assert!(p <= 0.001, "p = {p}");
        // two-sided symmetry
        let p2 = paired_significance(&a, &b).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn permutation_test_key_mismatch() {
        let a = vec![result("a", "bladder", "q0", "s0", "base", 0.4)];
        let b = vec![result("a", "bladder", "q1", "s0", "base", 0.4)];
        assert!(matches!(
            paired_significance(&a, &b),
            Err(EvalError::KeyMismatch(_))
        ));
    }

    #[test]
    fn parameter_counts_by_component() {
        let mut cfg = ModelConfig {
            widths: vec![2, 4],
            feat_channels: 3,
            ..ModelConfig::desk_default()
        };
        cfg.variant = Variant::ThreeDSeg;
        let (per_seg, total_seg) = count_parameters(&cfg);
        cfg.variant = Variant::ThreeDSegAlign;
        let (per_align, total_align) = count_parameters(&cfg);
        assert!(total_align > total_seg, "align head adds parameters");
        let ext_seg = per_seg.iter().find(|(c, _)| c == "ext").unwrap().1;
        let ext_align = per_align.iter().find(|(c, _)| c == "ext").unwrap().1;
        assert_eq!(ext_seg, ext_align);
        assert!(per_align.iter().any(|(c, _)| c == "aff"));
    }

    #[test]
    fn paper_scale_parameter_count_in_range() {
        let cfg = ModelConfig::paper_scale();
        let total = crate::model::parameter_count(&cfg);
        assert!(
            (4_300_000..=7_100_000).contains(&total),
            "paper-scale parameter count {total} outside [4.3M, 7.1M]"
        );
    }
}
