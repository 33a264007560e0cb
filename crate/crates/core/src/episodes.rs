//! Base/novel class and institution splits, the four class folds, episode
//! sampling for training and the enumerated evaluation protocol.
//!
//! One institution is held out as the novel institution. Subjects of every
//! base institution are split 3:1 into train/test. Within a fold, the fold's
//! two classes are novel and the remaining six are base classes. The base
//! dataset is base-institution training subjects with base-class masks; the
//! novel dataset is base-institution test subjects plus all novel-institution
//! subjects, with novel-class masks.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{compose, warp_mask, warp_volume, AffineTransform, Interpolation, MaskVolume, Volume};
use crate::phantom::{mix_seed, DatasetManifest, CANONICAL_CLASSES};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("unknown institution {0:?}")]
    UnknownInstitution(String),
    #[error("fold must be 1..=4, got {0}")]
    BadFold(u8),
    #[error("dataset classes do not match the canonical 8-class layout: {0:?}")]
    UnknownClasses(Vec<String>),
    #[error("insufficient subjects: {0}")]
    InsufficientSubjects(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The four folds partition the 8 classes into consecutive pairs.
pub fn fold_novel_classes(fold: u8) -> Result<[&'static str; 2], EpisodeError> {
    match fold {
        1 => Ok([CANONICAL_CLASSES[0], CANONICAL_CLASSES[1]]),
        2 => Ok([CANONICAL_CLASSES[2], CANONICAL_CLASSES[3]]),
        3 => Ok([CANONICAL_CLASSES[4], CANONICAL_CLASSES[5]]),
        4 => Ok([CANONICAL_CLASSES[6], CANONICAL_CLASSES[7]]),
        f => Err(EpisodeError::BadFold(f)),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub fold: u8,
    pub seed: u64,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub base_institutions: Vec<String>,
    pub novel_institutions: Vec<String>,
    /// Per base institution, 3:1 train/test subject ids.
    pub train_subjects: BTreeMap<String, Vec<String>>,
    pub test_subjects: BTreeMap<String, Vec<String>>,
    /// All subjects of the novel institution(s).
    pub novel_subjects: Vec<String>,
}

impl SplitSpec {
    pub fn all_train_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .train_subjects
            .values()
            .flat_map(|v| v.iter().cloned())
            .collect();
        ids.sort();
        ids
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), EpisodeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EpisodeError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Split construction: deterministic given `seed`.
pub fn make_splits(
    manifest: &DatasetManifest,
    novel_institution: &str,
    fold: u8,
    seed: u64,
) -> Result<SplitSpec, EpisodeError> {
    if !manifest
        .institutions
        .iter()
        .any(|i| i == novel_institution)
    {
        return Err(EpisodeError::UnknownInstitution(novel_institution.into()));
    }
    let canonical: Vec<&str> = CANONICAL_CLASSES.to_vec();
    if manifest.classes.len() != 8
        || manifest.classes.iter().zip(&canonical).any(|(a, b)| a != b)
    {
        return Err(EpisodeError::UnknownClasses(manifest.classes.clone()));
    }
    let novel = fold_novel_classes(fold)?;
    let novel_classes: Vec<String> = novel.iter().map(|s| s.to_string()).collect();
    let base_classes: Vec<String> = manifest
        .classes
        .iter()
        .filter(|c| !novel_classes.contains(c))
        .cloned()
        .collect();

    let base_institutions: Vec<String> = manifest
        .institutions
        .iter()
        .filter(|i| i.as_str() != novel_institution)
        .cloned()
        .collect();

    let mut train_subjects = BTreeMap::new();
    let mut test_subjects = BTreeMap::new();
    for inst in &base_institutions {
        let mut ids: Vec<String> = manifest
            .subjects
            .iter()
            .filter(|r| &r.institution == inst)
            .map(|r| r.id.clone())
            .collect();
        if ids.len() < 2 {
            return Err(EpisodeError::InsufficientSubjects(format!(
                "institution {inst} has {} subjects, need >= 2",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5711, hash_str(inst)));
        ids.sort();
        ids.shuffle(&mut rng);
        // 3:1 train:test, at least one test subject
        let n_test = ((ids.len() as f64) / 4.0).round().max(1.0) as usize;
        let n_test = n_test.min(ids.len() - 1);
        let (test, train) = ids.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort();
        test.sort();
        train_subjects.insert(inst.clone(), train);
        test_subjects.insert(inst.clone(), test);
    }

    let novel_subjects: Vec<String> = manifest
        .subjects
        .iter()
        .filter(|r| r.institution == novel_institution)
        .map(|r| r.id.clone())
        .collect();

    Ok(SplitSpec {
        fold,
        seed,
        base_classes,
        novel_classes,
        base_institutions,
        novel_institutions: vec![novel_institution.to_string()],
        train_subjects,
        test_subjects,
        novel_subjects,
    })
}

fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportScenario {
    Base,
    Novel,
}

impl std::fmt::Display for SupportScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SupportScenario::Base => write!(f, "base"),
            SupportScenario::Novel => write!(f, "novel"),
        }
    }
}

/// A support/query pairing by subject id; volumes are attached later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub class: String,
    pub support_id: String,
    pub support_institution: String,
    pub query_id: String,
    pub query_institution: String,
    /// Support-source scenario; the `all` scenario is the union of both.
    pub scenario: SupportScenario,
}

/// Uniform base-class, distinct support/query subjects out of the base
/// training pool.
pub fn sample_training_episode(
    split: &SplitSpec,
    manifest: &DatasetManifest,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeSpec, EpisodeError> {
    let pool = split.all_train_ids();
    if pool.len() < 2 {
        return Err(EpisodeError::InsufficientSubjects(format!(
            "training pool has {} subjects, need >= 2",
            pool.len()
        )));
    }
    let class = split.base_classes[rng.random_range(0..split.base_classes.len())].clone();
    let si = rng.random_range(0..pool.len());
    let mut qi = rng.random_range(0..pool.len() - 1);
    if qi >= si {
        qi += 1;
    }
    let inst_of = |id: &str| -> String {
        manifest
            .subjects
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.institution.clone())
            .unwrap_or_default()
    };
    Ok(EpisodeSpec {
        class,
        support_id: pool[si].clone(),
        support_institution: inst_of(&pool[si]),
        query_id: pool[qi].clone(),
        query_institution: inst_of(&pool[qi]),
        scenario: SupportScenario::Base,
    })
}

/// The full evaluation grid: for each novel class and each novel-institution
/// query subject, one episode per support institution, with the support
/// subject sampled (seeded per class/query/institution) from that
/// institution's eligible pool: test subjects for base institutions, the
/// other novel-institution subjects for the novel one.
pub fn enumerate_eval_episodes(
    split: &SplitSpec,
    manifest: &DatasetManifest,
) -> Result<Vec<EpisodeSpec>, EpisodeError> {
    if split.novel_subjects.is_empty() {
        return Err(EpisodeError::InsufficientSubjects(
            "novel institution has no subjects".into(),
        ));
    }
    let mut episodes = Vec::new();
    for (ci, class) in split.novel_classes.iter().enumerate() {
        for (qi, query_id) in split.novel_subjects.iter().enumerate() {
            for inst in manifest.institutions.iter() {
                let is_novel = split.novel_institutions.iter().any(|i| i == inst);
                let pool: Vec<&String> = if is_novel {
                    split
                        .novel_subjects
                        .iter()
                        .filter(|id| *id != query_id)
                        .collect()
                } else {
                    split
                        .test_subjects
                        .get(inst)
                        .map(|v| v.iter().filter(|id| *id != query_id).collect())
                        .unwrap_or_default()
                };
                if pool.is_empty() {
                    return Err(EpisodeError::InsufficientSubjects(format!(
                        "no eligible support subjects in {inst} for query {query_id}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    split.seed,
                    0xE9A1 ^ hash_str(class) ^ hash_str(inst),
                    (ci as u64) << 32 | qi as u64,
                ));
                let support_id = pool[rng.random_range(0..pool.len())].clone();
                episodes.push(EpisodeSpec {
                    class: class.clone(),
                    support_id,
                    support_institution: inst.clone(),
                    query_id: query_id.clone(),
                    query_institution: split.novel_institutions[0].clone(),
                    scenario: if is_novel {
                        SupportScenario::Novel
                    } else {
                        SupportScenario::Base
                    },
                });
            }
        }
    }
    Ok(episodes)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentRanges {
    /// Max per-axis rotation, degrees.
    pub rotation_deg: f64,
    /// Max translation as a fraction of the extent.
    pub translation_frac: f64,
    /// Isotropic scale range.
    pub scale_range: [f64; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translation_frac: 0.05,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_frac: 0.0,
            scale_range: [1.0, 1.0],
        }
    }
}

/// The parameters actually drawn for one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

/// Sample an affine inside the configured ranges. Zero ranges yield the
/// exact identity.
pub fn sample_augment_transform(
    ranges: &AugmentRanges,
    rng: &mut ChaCha8Rng,
) -> (AffineTransform, AugmentDraw) {
    let rot = ranges.rotation_deg.to_radians();
    let mut ang = |r: f64| if r == 0.0 { 0.0 } else { rng.random_range(-r..=r) };
    let rotation = [ang(rot), ang(rot), ang(rot)];
    let tmax = ranges.translation_frac * 2.0;
    let translation = [ang(tmax), ang(tmax), ang(tmax)];
    let scale = if ranges.scale_range[0] == ranges.scale_range[1] {
        ranges.scale_range[0]
    } else {
        rng.random_range(ranges.scale_range[0]..=ranges.scale_range[1])
    };
    let rot_m = AffineTransform::rotation(rotation[0], rotation[1], rotation[2]);
    let scale_m = AffineTransform::scaling([scale; 3]);
    let mut t = compose(&rot_m, &scale_m).expect("rotation/scale are invertible");
    t.translation = translation;
    (
        t,
        AugmentDraw {
            rotation,
            translation,
            scale,
        },
    )
}

/// Apply one sampled affine to the image (trilinear) and every mask
/// (nearest, so hard masks stay hard).
pub fn augment(
    image: &Volume,
    masks: &[MaskVolume],
    ranges: &AugmentRanges,
    rng: &mut ChaCha8Rng,
) -> (Volume, Vec<MaskVolume>, AugmentDraw) {
    let (t, draw) = sample_augment_transform(ranges, rng);
    let image = warp_volume(image, &t, Interpolation::Trilinear)
        .expect("sampled augmentation affine is invertible");
    let masks = masks
        .iter()
        .map(|m| warp_mask(m, &t, Interpolation::Nearest).expect("invertible"))
        .collect();
    (image, masks, draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{DatasetManifest, SubjectRecord, MANIFEST_MAGIC};

    fn toy_manifest(institutions: usize, subjects: usize) -> DatasetManifest {
        let inst_names: Vec<String> = (0..institutions).map(|i| format!("site_{i}")).collect();
        let mut recs = Vec::new();
        for inst in &inst_names {
            for s in 0..subjects {
                recs.push(SubjectRecord {
                    id: format!("{inst}_subj_{s}"),
                    institution: inst.clone(),
                    dir: format!("subjects/{inst}_subj_{s}"),
                });
            }
        }
        DatasetManifest {
            magic: MANIFEST_MAGIC.to_string(),
            seed: 0,
            shape: [64, 64, 16],
            spacing: [1.0, 1.0, 1.0],
            classes: CANONICAL_CLASSES.iter().map(|s| s.to_string()).collect(),
            institutions: inst_names,
            subjects: recs,
        }
    }

    #[test]
    fn fold_one_uses_bladder_and_transition_zone() {
        let m = toy_manifest(6, 4);
        let split = make_splits(&m, "site_5", 1, 7).unwrap();
        assert_eq!(split.novel_classes, vec!["bladder", "transition_zone"]);
        assert_eq!(split.base_classes.len(), 6);
        assert!(!split.base_classes.contains(&"bladder".to_string()));
        // the 4 folds partition the 8 classes
        let mut all: Vec<&str> = Vec::new();
        for f in 1..=4 {
            all.extend(fold_novel_classes(f).unwrap());
        }
        all.sort_unstable();
        let mut canon = CANONICAL_CLASSES.to_vec();
        canon.sort_unstable();
        assert_eq!(all, canon);
    }

    #[test]
    fn splits_are_three_to_one_and_deterministic() {
        let m = toy_manifest(6, 4);
        let a = make_splits(&m, "site_0", 2, 13).unwrap();
        let b = make_splits(&m, "site_0", 2, 13).unwrap();
        assert_eq!(a, b);
        for inst in &a.base_institutions {
            assert_eq!(a.train_subjects[inst].len(), 3);
            assert_eq!(a.test_subjects[inst].len(), 1);
            for id in &a.test_subjects[inst] {
                assert!(!a.train_subjects[inst].contains(id));
            }
        }
        assert!(matches!(
            make_splits(&m, "nowhere", 1, 0),
            Err(EpisodeError::UnknownInstitution(_))
        ));
        assert!(matches!(
            make_splits(&m, "site_0", 9, 0),
            Err(EpisodeError::BadFold(9))
        ));
    }

    #[test]
    fn eval_episode_count_matches_protocol() {
        // 6 institutions, 21 novel-institution queries, 2 novel classes
        // -> 6 * 21 * 2 = 252 episodes
        let m = toy_manifest(6, 21);
        let split = make_splits(&m, "site_3", 1, 3).unwrap();
        let eps = enumerate_eval_episodes(&split, &m).unwrap();
        assert_eq!(eps.len(), 252);
        for e in &eps {
            assert_ne!(e.support_id, e.query_id);
            assert_eq!(e.query_institution, "site_3");
        }
        let novel: Vec<_> = eps
            .iter()
            .filter(|e| e.scenario == SupportScenario::Novel)
            .collect();
        let base: Vec<_> = eps
            .iter()
            .filter(|e| e.scenario == SupportScenario::Base)
            .collect();
        assert_eq!(novel.len() + base.len(), eps.len());
        assert_eq!(novel.len(), 21 * 2); // one novel-support episode per (class, query)
        // determinism and full coverage: every (class, query) appears once
        // per institution
        let eps2 = enumerate_eval_episodes(&split, &m).unwrap();
        assert_eq!(eps, eps2);
    }

    #[test]
    fn training_sampler_respects_invariants() {
        let m = toy_manifest(3, 4);
        let split = make_splits(&m, "site_2", 1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let e = sample_training_episode(&split, &m, &mut rng).unwrap();
            assert_ne!(e.support_id, e.query_id);
            assert!(split.base_classes.contains(&e.class));
            assert!(!split.novel_subjects.contains(&e.support_id));
            assert!(!split.novel_subjects.contains(&e.query_id));
            let train_pool = split.all_train_ids();
            assert!(train_pool.contains(&e.support_id));
            assert!(train_pool.contains(&e.query_id));
        }
    }

    #[test]
    fn two_subject_pool_is_forced() {
        let m = toy_manifest(2, 2);
        // base institution (site_0) has 2 subjects: 1 train, 1 test ->
        // training pool of 1 is insufficient
        let split = make_splits(&m, "site_1", 1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_training_episode(&split, &m, &mut rng),
            Err(EpisodeError::InsufficientSubjects(_))
        ));

        // with 3 institutions of 2, two train subjects remain: forced pair
        let m = toy_manifest(3, 2);
        let split = make_splits(&m, "site_2", 1, 5).unwrap();
        let pool = split.all_train_ids();
        assert_eq!(pool.len(), 2);
        for _ in 0..20 {
            let e = sample_training_episode(&split, &m, &mut rng).unwrap();
            assert!(pool.contains(&e.support_id) && pool.contains(&e.query_id));
            assert_ne!(e.support_id, e.query_id);
        }
    }

    #[test]
    fn class_sampling_is_uniform() {
        let m = toy_manifest(3, 4);
        let split = make_splits(&m, "site_2", 1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 10_000;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            let e = sample_training_episode(&split, &m, &mut rng).unwrap();
            *counts.entry(e.class).or_default() += 1;
        }
        let k = split.base_classes.len() as f64;
        let expected = n as f64 / k;
        let sigma = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for (class, &c) in &counts {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "class {class} count {c} outside 3 sigma of {expected}"
            );
        }
        assert_eq!(counts.len(), split.base_classes.len());
    }

    #[test]
    fn zero_range_augmentation_is_identity() {
        let config = crate::phantom::GenerationConfig {
            shape: [32, 32, 8],
            ..crate::phantom::GenerationConfig::desk_default()
        };
        let s = crate::phantom::generate_subject(&config, 0, 0).unwrap();
        let mask = s.class_mask("bladder").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, masks, draw) = augment(&s.image, &[mask.clone()], &AugmentRanges::none(), &mut rng);
        assert_eq!(img.data, s.image.data);
        assert_eq!(masks[0].data, mask.data);
        assert_eq!(draw.scale, 1.0);
    }

    #[test]
    fn augmentation_draws_stay_in_bounds() {
        let ranges = AugmentRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (_, draw) = sample_augment_transform(&ranges, &mut rng);
            for r in draw.rotation {
                assert!(r.abs() <= ranges.rotation_deg.to_radians());
            }
            for t in draw.translation {
                assert!(t.abs() <= ranges.translation_frac * 2.0);
            }
            assert!(draw.scale >= ranges.scale_range[0] && draw.scale <= ranges.scale_range[1]);
        }
    }
}
