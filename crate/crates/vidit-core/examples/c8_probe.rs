use std::time::Instant;

use vidit_core::train::{probe_loss, train_step};
use vidit_core::{
    euler_sample, fit, make_sample, GeomParams, Mode, ModelConfig, SampleConfig, TaskKind,
    TrainConfig, TrainSample, TrainState,
};

fn main() {
    let geom = GeomParams::default();
    let data: Vec<TrainSample> =
        (0..8).map(|i| make_sample(TaskKind::Mv2vInpaint, i, &geom).unwrap()).collect();
    let model = ModelConfig { mode: Mode::FullFt, ..ModelConfig::default() };
    let train = TrainConfig { seed: 0, ..TrainConfig::default() };
    let mut state = TrainState::init(&model, &train).unwrap();

    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = probe_loss(&state.params, &model, &data[0], 7).unwrap();
    }
    println!("probe_loss (3 fwd): {:.1} ms/call", t0.elapsed().as_millis() as f64 / 10.0);

    let t0 = Instant::now();
    for _ in 0..10 {
        train_step(&mut state, &model, &train, &data[0..1]).unwrap();
    }
    println!("train_step batch=1 fullft: {:.1} ms", t0.elapsed().as_millis() as f64 / 10.0);

    let t0 = Instant::now();
    for _ in 0..10 {
        train_step(&mut state, &model, &train, &data[0..4]).unwrap();
    }
    println!("train_step batch=4 fullft: {:.1} ms", t0.elapsed().as_millis() as f64 / 10.0);

    let amodel = ModelConfig { mode: Mode::Adapter, ..ModelConfig::default() };
    let atrain = TrainConfig { steps: 2, warmup_steps: 2, ..train.clone() };
    let out = fit(&amodel, &atrain, &data).unwrap();
    let mut astate = out.state;
    let t0 = Instant::now();
    for _ in 0..10 {
        train_step(&mut astate, &amodel, &atrain, &data[0..4]).unwrap();
    }
    println!("train_step batch=4 adapter: {:.1} ms", t0.elapsed().as_millis() as f64 / 10.0);

    let sc = SampleConfig { steps: 10, ..SampleConfig::default() };
    let t0 = Instant::now();
    let _ = euler_sample(&astate.params, &amodel, &data[0].vcu, &sc).unwrap();
    println!("euler_sample 10 steps: {:.1} ms", t0.elapsed().as_millis() as f64);
}
