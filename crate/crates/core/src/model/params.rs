//! Named parameter storage with deterministic, component-seeded
//! initialization. Components (`ext`, `seg`, `aff`) are seeded independently
//! so a shared component initializes identically across variants.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::nn::Real;
use crate::phantom::mix_seed;

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct ParamSet<R: Real> {
    entries: Vec<(String, ArrayD<R>)>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<R>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<R> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, ArrayD<R>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (String, ArrayD<R>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &(String, ArrayD<R>) {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut (String, ArrayD<R>) {
        &mut self.entries[i]
    }

    /// Total trainable scalar count.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Scalar count per component prefix (`ext`, `seg`, `aff`).
    pub fn component_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, v) in &self.entries {
            let comp = name.split('.').next().unwrap_or("?").to_string();
            match out.iter_mut().find(|(c, _)| *c == comp) {
                Some((_, n)) => *n += v.len(),
                None => out.push((comp, v.len())),
            }
        }
        out
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in &self.entries {
            out.add(name.clone(), v.mapv(|x| T::from_f64(x.to_f64())));
        }
        out
    }
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

struct Init<'a, R: Real> {
    set: &'a mut ParamSet<R>,
    rng: ChaCha8Rng,
}

impl<'a, R: Real> Init<'a, R> {
    fn he_normal(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).unwrap();
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            R::from_f64(normal.sample(&mut self.rng))
        });
        self.set.add(name, v);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.set.add(name, ArrayD::zeros(IxDyn(shape)));
    }

    fn ones(&mut self, name: String, shape: &[usize]) {
        self.set.add(name, ArrayD::from_elem(IxDyn(shape), R::one()));
    }

    fn conv3(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.he_normal(format!("{prefix}.w"), &[cout, cin, 3, 3, 3], cin * 27);
        self.zeros(format!("{prefix}.b"), &[cout]);
    }

    fn conv1(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.he_normal(format!("{prefix}.w"), &[cout, cin], cin);
        self.zeros(format!("{prefix}.b"), &[cout]);
    }

    /// Pointwise conv whose bias starts at small random values instead of
    /// zero. Used for the embedding head: relu-dead voxels otherwise map to
    /// the exact zero vector, which has no usable cosine direction.
    fn conv1_noisy_bias(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.he_normal(format!("{prefix}.w"), &[cout, cin], cin);
        let normal = rand_distr::Normal::new(0.0, 0.05).unwrap();
        let b = ArrayD::from_shape_fn(IxDyn(&[cout]), |_| {
            R::from_f64(normal.sample(&mut self.rng))
        });
        self.set.add(format!("{prefix}.b"), b);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.ones(format!("{prefix}.gamma"), &[c]);
        self.zeros(format!("{prefix}.beta"), &[c]);
    }

    fn linear(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.he_normal(format!("{prefix}.w"), &[cout, cin], cin);
        self.zeros(format!("{prefix}.b"), &[cout]);
    }

    fn linear_zero(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.zeros(format!("{prefix}.w"), &[cout, cin]);
        self.zeros(format!("{prefix}.b"), &[cout]);
    }
}

/// Initialize all parameters for `config`. The affine head's output layer is
/// zero-initialized so the predicted transform starts at the exact identity.
pub fn init_params<R: Real>(config: &ModelConfig, seed: u64) -> ParamSet<R> {
    let mut set = ParamSet::new();
    let widths = &config.widths;
    let levels = widths.len();
    let norm = config.instance_norm;

    {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE87, 0)),
            set: &mut set,
        };
        init.conv3("ext.enc0", 1, widths[0]);
        if norm {
            init.norm("ext.enc0.in", widths[0]);
        }
        for i in 1..levels {
            init.conv3(&format!("ext.enc{i}"), widths[i - 1], widths[i]);
            if norm {
                init.norm(&format!("ext.enc{i}.in"), widths[i]);
            }
        }
        init.conv3("ext.bott", widths[levels - 1], widths[levels - 1]);
        if norm {
            init.norm("ext.bott.in", widths[levels - 1]);
        }
        for i in (0..levels.saturating_sub(1)).rev() {
            init.conv1(&format!("ext.dec{i}.proj"), widths[i + 1], widths[i]);
            init.conv3(&format!("ext.dec{i}"), widths[i], widths[i]);
            if norm {
                init.norm(&format!("ext.dec{i}.in"), widths[i]);
            }
        }
        init.conv1_noisy_bias("ext.head", widths[0], config.feat_channels);
    }

    if config.variant.use_seg_head() {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5E6, 0)),
            set: &mut set,
        };
        init.conv1("seg.hidden", config.feat_channels, config.seg_hidden);
        init.conv1("seg.out", config.seg_hidden, config.num_classes + 1);
    }

    if config.variant.use_align_head() {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xAF1, 0)),
            set: &mut set,
        };
        let [c0, c1] = config.affine_channels;
        init.conv3("aff.conv0", config.num_classes + 1, c0);
        if norm {
            init.norm("aff.conv0.in", c0);
        }
        init.conv3("aff.conv1", c0, c1);
        init.linear("aff.fc0", c1, config.affine_hidden);
        init.linear_zero("aff.out", config.affine_hidden, 12);
    }

    set
}

/// Closed-form trainable parameter count for `config`; must agree with
/// `init_params(..).total_len()`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let w = &config.widths;
    let levels = w.len();
    let norm = |c: usize| if config.instance_norm { 2 * c } else { 0 };
    let conv3 = |cin: usize, cout: usize| 27 * cin * cout + cout;
    let conv1 = |cin: usize, cout: usize| cin * cout + cout;

    let mut n = conv3(1, w[0]) + norm(w[0]);
    for i in 1..levels {
        n += conv3(w[i - 1], w[i]) + norm(w[i]);
    }
    n += conv3(w[levels - 1], w[levels - 1]) + norm(w[levels - 1]);
    for i in 0..levels.saturating_sub(1) {
        n += conv1(w[i + 1], w[i]) + conv3(w[i], w[i]) + norm(w[i]);
    }
    n += conv1(w[0], config.feat_channels);

    if config.variant.use_seg_head() {
        n += conv1(config.feat_channels, config.seg_hidden);
        n += conv1(config.seg_hidden, config.num_classes + 1);
    }
    if config.variant.use_align_head() {
        let [c0, c1] = config.affine_channels;
        n += conv3(config.num_classes + 1, c0) + norm(c0);
        n += conv3(c0, c1);
        n += conv1(c1, config.affine_hidden); // fc0 has the same shape math
        n += conv1(config.affine_hidden, 12); // zero-initialized output layer
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn closed_form_count_matches_init() {
        for variant in [
            Variant::ThreeD,
            Variant::ThreeDSeg,
            Variant::ThreeDSegAlign,
            Variant::Supervised,
        ] {
            let mut cfg = ModelConfig {
                variant,
                widths: vec![2, 4],
                feat_channels: 3,
                ..ModelConfig::desk_default()
            };
            if variant == Variant::Supervised {
                cfg.num_classes = 8;
            }
            let params = init_params::<f64>(&cfg, 7);
            assert_eq!(
                params.total_len(),
                parameter_count(&cfg),
                "count mismatch for {variant}"
            );
        }
    }

    #[test]
    fn toy_extractor_count_by_hand() {
        // widths (2, 4), C_f = 3, no norm, 3d variant:
        //   enc0 conv3(1->2):   27*2 + 2   = 56
        //   enc1 conv3(2->4):   27*8 + 4   = 220
        //   bott conv3(4->4):   27*16 + 4  = 436
        //   dec0 proj conv1(4->2): 8 + 2   = 10
        //   dec0 conv3(2->2):   27*4 + 2   = 110
        //   head conv1(2->3):   6 + 3      = 9
        let cfg = ModelConfig {
            variant: Variant::ThreeD,
            widths: vec![2, 4],
            feat_channels: 3,
            instance_norm: false,
            ..ModelConfig::desk_default()
        };
        assert_eq!(parameter_count(&cfg), 56 + 220 + 436 + 10 + 110 + 9);
    }

    #[test]
    fn shared_components_init_identically_across_variants() {
        let cfg_a = ModelConfig {
            variant: Variant::ThreeDSeg,
            ..ModelConfig::desk_default()
        };
        let cfg_b = ModelConfig {
            variant: Variant::ThreeDSegAlign,
            ..ModelConfig::desk_default()
        };
        let a = init_params::<f32>(&cfg_a, 42);
        let b = init_params::<f32>(&cfg_b, 42);
        for (name, v) in a.iter() {
            assert_eq!(v, b.get(name), "component param {name} differs");
        }
        // the align head's final layer starts at zero
        assert!(b.get("aff.out.w").iter().all(|&v| v == 0.0));
    }
}
