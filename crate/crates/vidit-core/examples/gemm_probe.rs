use std::time::Instant;

use vidit_core::codec::encode_vcu_with;
use vidit_core::model::net::build_loss;
use vidit_core::model::{patch_tokens, text_tokens, TokenGrid};
use vidit_core::train::flow_pair;
use vidit_core::{
    make_sample, GeomParams, LatentGrid, Mode, ModelConfig, Rng, TaskKind, Tensor, TrainConfig,
    TrainState,
};

fn main() {
    let geom = GeomParams::default();
    let sample = make_sample(TaskKind::Mv2vInpaint, 0, &geom).unwrap();
    let model = ModelConfig { mode: Mode::FullFt, ..ModelConfig::default() };
    let train = TrainConfig { seed: 0, ..TrainConfig::default() };
    let state = TrainState::init(&model, &train).unwrap();

    let t0 = Instant::now();
    let bundle = encode_vcu_with(&sample.vcu, &model.codec, model.decoupled).unwrap();
    println!("encode_vcu: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3);

    let clean = {
        let enc = vidit_core::codec::encode_video(&sample.target, &model.codec).unwrap();
        enc
    };
    let mut noise = vec![0.0f32; clean.tensor().numel()];
    Rng::new(7).fill_normal(&mut noise);
    let noise = Tensor::from_vec(clean.tensor().shape(), noise).unwrap();
    let (x_t, v_target) = flow_pair(clean.tensor(), &noise, 0.5).unwrap();
    let x_t = LatentGrid::new(x_t).unwrap();
    let grid = TokenGrid::from_latent(&x_t, bundle.ref_latent_len, &model).unwrap();
    let v_tokens = patch_tokens(&LatentGrid::new(v_target).unwrap(), &grid);
    let ids = text_tokens(sample.vcu.prompt(), &model);

    let iters = 20;
    let t0 = Instant::now();
    for _ in 0..iters {
        let built = build_loss::<f32>(
            &state.params,
            &model,
            &bundle,
            &x_t,
            &v_tokens,
            &ids,
            0.5,
            None,
        )
        .unwrap();
        std::hint::black_box(built.loss);
    }
    let fwd = t0.elapsed().as_secs_f64() * 1e3 / iters as f64;
    println!("build_loss (graph+forward): {fwd:.2} ms");

    let built =
        build_loss::<f32>(&state.params, &model, &bundle, &x_t, &v_tokens, &ids, 0.5, None)
            .unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let table = built.graph.backward(built.loss).unwrap();
        std::hint::black_box(table.get(built.leaves["patchify.weight"]));
    }
    let bwd = t0.elapsed().as_secs_f64() * 1e3 / iters as f64;
    println!("backward: {bwd:.2} ms");

    let t0 = Instant::now();
    let mut table = built.graph.backward(built.loss).unwrap();
    let mut total = 0usize;
    for (_, var) in &built.leaves {
        if let Some(g) = table.take(*var) {
            total += g.len();
        }
    }
    println!(
        "extract {} values: {:.2} ms",
        total,
        t0.elapsed().as_secs_f64() * 1e3 - bwd
    );
}
