//! Manual phase profiler. `cargo test -p protoseg3d --test profile_phases -- --ignored --nocapture`

use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use protoseg3d::model::net::{extractor_forward, ParamNodes};
use protoseg3d::model::{forward_episode, init_params, EpisodeData, ModelConfig, Variant, WindowGrid};
use protoseg3d::nn::tape::Tape;
use protoseg3d::phantom::{generate_subject, GenerationConfig};

#[test]
#[ignore]
fn profile_forward_phases() {
    let gen = GenerationConfig {
        subjects_per_institution: 2,
        ..GenerationConfig::desk_default()
    };
    let s0 = generate_subject(&gen, 0, 0).unwrap();
    let s1 = generate_subject(&gen, 0, 1).unwrap();
    let mc = ModelConfig {
        variant: Variant::ThreeD,
        widths: vec![4, 8, 16],
        feat_channels: 8,
        window_ratios: [0.5, 0.5, 0.5],
        ..ModelConfig::desk_default()
    };
    let params = init_params::<f32>(&mc, 0);

    // extractor alone
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let pn = ParamNodes::push(&mut tape, &params);
        let [w, h, d] = s0.image.shape();
        let img = tape.leaf(
            ArrayD::from_shape_vec(
                IxDyn(&[1, w, h, d]),
                s0.image.data.iter().map(|&x| x as f32).collect(),
            )
            .unwrap(),
        );
        let f = extractor_forward(&mut tape, &pn, &mc, img);
        std::hint::black_box(tape.value(f).len());
    }
    eprintln!("extractor fwd: {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1000.0);

    // window grid
    let grid = WindowGrid::new([64, 64, 16], mc.window_ratios).unwrap();
    eprintln!("grid K = {}", grid.k());

    // full episode forward
    let episode = EpisodeData {
        support_image: s0.image.clone(),
        support_mask: s0.class_mask("bladder").unwrap(),
        query_image: s1.image.clone(),
        query_mask: Some(s1.class_mask("bladder").unwrap()),
        supervised_class_channel: None,
    };
    let t0 = Instant::now();
    for _ in 0..reps {
        let fwd = forward_episode(&mc, &params, &episode).unwrap();
        std::hint::black_box(fwd.prediction.data.len());
    }
    eprintln!("episode fwd: {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1000.0);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut fwd = forward_episode(&mc, &params, &episode).unwrap();
        let target = fwd.fewshot_target.unwrap();
        let loss = fwd.tape.dice_loss(fwd.prediction_node, target);
        let grads = fwd.tape.backward(loss);
        std::hint::black_box(grads.len());
    }
    eprintln!("episode fwd+bwd: {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1000.0);
}
