//! The `check` subcommand: fast invariant and gradient smoke tests over
//! the whole pipeline, runnable on any build.

use std::collections::BTreeMap;
use std::path::PathBuf;

use vidit_core::codec::{decode_video, decouple, encode_video, encode_vcu_with, LatentGrid};
use vidit_core::datagen::io::{read_dataset, write_dataset};
use vidit_core::gradcheck::max_rel_error;
use vidit_core::harness::{checkpoint, eval};
use vidit_core::model::net::{build_loss, embed_context, forward, patchify};
use vidit_core::model::{init_params, patch_tokens, text_tokens, TokenGrid};
use vidit_core::train::probe_loss;
use vidit_core::vcu::{make_mv2v, make_r2v, make_t2v, make_v2v, with_references};
use vidit_core::{
    euler_sample, make_sample, Checkpoint, EvalOptions, FrameSeq, GeomParams, MaskSeq, Mode,
    ModelConfig, PlacementSpec, Rng, SampleConfig, TaskKind, Tensor, TrainConfig, TrainState,
};

type Check = fn() -> Result<(), String>;

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("codec_roundtrip", codec_roundtrip),
        ("vcu_layouts", vcu_layouts),
        ("decouple_partition", decouple_partition),
        ("zero_init_output", zero_init_output),
        ("mask_channel_neutrality", mask_channel_neutrality),
        ("model_gradients", model_gradients),
        ("checkpoint_roundtrip", checkpoint_roundtrip),
        ("dataset_roundtrip", dataset_roundtrip),
        ("sampler_shapes", sampler_shapes),
        ("eval_determinism", eval_determinism),
    ]
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn tiny_model(mode: Mode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        mode,
        placement: PlacementSpec::DistributedEven(1),
        ..ModelConfig::default()
    }
}

fn tiny_geom() -> GeomParams {
    GeomParams {
        frames: 4,
        height: 16,
        width: 16,
    }
}

fn random_video(count: usize, h: usize, w: usize, rng: &mut Rng) -> FrameSeq {
    let n = count * h * w * 3;
    let data: Vec<f32> = (0..n).map(|_| rng.range_f32(-1.0, 1.0)).collect();
    FrameSeq::new(Tensor::from_vec(&[count, h, w, 3], data).unwrap()).unwrap()
}

fn random_mask(count: usize, h: usize, w: usize, rng: &mut Rng) -> MaskSeq {
    let n = count * h * w;
    let data: Vec<f32> = (0..n)
        .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
        .collect();
    MaskSeq::new(Tensor::from_vec(&[count, h, w], data).unwrap()).unwrap()
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vidit-check-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

fn codec_roundtrip() -> Result<(), String> {
    let cfg = vidit_core::CodecConfig::default();
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let video = random_video(4, 16, 16, &mut rng);
        let latent = encode_video(&video, &cfg).map_err(err)?;
        let back = decode_video(&latent, &cfg).map_err(err)?;
        if !back.tensor().bit_eq(video.tensor()) {
            return Err(format!("seed {seed}: decode(encode(v)) differs from v"));
        }
    }
    Ok(())
}

fn vcu_layouts() -> Result<(), String> {
    let (h, w) = (8, 8);
    for n in [2usize, 4] {
        let t2v = make_t2v("p", n, h, w).map_err(err)?;
        if t2v.frames().tensor().max_abs() != 0.0 {
            return Err("t2v frames are not all zero".into());
        }
        if t2v.masks().tensor().data().iter().any(|&m| m != 1.0) {
            return Err("t2v masks are not all one".into());
        }
        for l in 1usize..=2 {
            let mut rng = Rng::new((l * 10 + n) as u64);
            let refs = random_video(l, h, w, &mut rng);
            let r2v = make_r2v("p", &refs, n).map_err(err)?;
            let masks = r2v.masks().tensor().data();
            let split = l * h * w;
            if masks[..split].iter().any(|&m| m != 0.0)
                || masks[split..].iter().any(|&m| m != 1.0)
            {
                return Err(format!("r2v mask layout wrong at l={l}, n={n}"));
            }
            let composed = with_references(&t2v, &refs).map_err(err)?;
            if !composed.frames().tensor().bit_eq(r2v.frames().tensor())
                || !composed.masks().tensor().bit_eq(r2v.masks().tensor())
            {
                return Err(format!(
                    "with_references(t2v) disagrees with r2v at l={l}, n={n}"
                ));
            }
        }
        let mut rng = Rng::new(n as u64);
        let video = random_video(n, h, w, &mut rng);
        let v2v = make_v2v("p", &video).map_err(err)?;
        if v2v.masks().tensor().data().iter().any(|&m| m != 1.0) {
            return Err("v2v masks are not all one".into());
        }
        let given = random_mask(n, h, w, &mut rng);
        let mv2v = make_mv2v("p", &video, &given).map_err(err)?;
        if !mv2v.masks().tensor().bit_eq(given.tensor()) {
            return Err("mv2v does not keep the given masks".into());
        }
    }
    Ok(())
}

fn decouple_partition() -> Result<(), String> {
    for seed in 0..10u64 {
        let mut rng = Rng::new(100 + seed);
        let frames = random_video(3, 8, 8, &mut rng);
        let masks = random_mask(3, 8, 8, &mut rng);
        let (fc, fk) = decouple(&frames, &masks).map_err(err)?;
        let f = frames.tensor().data();
        let (c, k) = (fc.tensor().data(), fk.tensor().data());
        for i in 0..f.len() {
            if c[i] + k[i] != f[i] {
                return Err(format!("seed {seed}: partition does not sum at {i}"));
            }
            if c[i] * k[i] != 0.0 {
                return Err(format!("seed {seed}: streams overlap at {i}"));
            }
        }
    }
    Ok(())
}

fn zero_init_output() -> Result<(), String> {
    for mode in [Mode::FullFt, Mode::Adapter] {
        let cfg = tiny_model(mode);
        let params = init_params(&cfg, &mut Rng::new(7)).map_err(err)?;
        let sample = make_sample(TaskKind::Mv2vInpaint, 3, &tiny_geom()).map_err(err)?;
        let bundle = encode_vcu_with(&sample.vcu, &cfg.codec, cfg.decoupled).map_err(err)?;
        let shape = bundle.x_c.tensor().shape().to_vec();
        let mut noise = vec![0.0f32; bundle.x_c.tensor().numel()];
        Rng::new(11).fill_normal(&mut noise);
        let x_t = LatentGrid::new(Tensor::from_vec(&shape, noise).map_err(err)?).map_err(err)?;
        let noisy = patchify(&x_t, bundle.ref_latent_len, &params, &cfg).map_err(err)?;
        let ctx = embed_context(&bundle, &params, &cfg).map_err(err)?;
        let ids = text_tokens(sample.vcu.prompt(), &cfg);
        let out = forward(&params, &cfg, &noisy, &ctx, &ids, 0.5).map_err(err)?;
        let peak = out.max_abs();
        if peak > 1e-7 {
            return Err(format!("{mode}: init output peak {peak} exceeds 1e-7"));
        }
    }
    Ok(())
}

fn mask_channel_neutrality() -> Result<(), String> {
    let cfg = tiny_model(Mode::FullFt);
    let params = init_params(&cfg, &mut Rng::new(9)).map_err(err)?;
    let sample = make_sample(TaskKind::Mv2vInpaint, 5, &tiny_geom()).map_err(err)?;
    let bundle = encode_vcu_with(&sample.vcu, &cfg.codec, cfg.decoupled).map_err(err)?;
    let base = embed_context(&bundle, &params, &cfg).map_err(err)?;
    let mut flipped = bundle;
    let ones = vec![1.0f32; flipped.m_lat.numel()];
    flipped.m_lat = Tensor::from_vec(flipped.m_lat.shape(), ones).map_err(err)?;
    let varied = embed_context(&flipped, &params, &cfg).map_err(err)?;
    if !varied.bit_eq(&base) {
        return Err("mask channel leaks into context embedding at init".into());
    }
    Ok(())
}

fn model_gradients() -> Result<(), String> {
    let cfg = tiny_model(Mode::Adapter);
    let params = init_params(&cfg, &mut Rng::new(21)).map_err(err)?;
    let sample = make_sample(TaskKind::V2vGray, 2, &tiny_geom()).map_err(err)?;
    let bundle = encode_vcu_with(&sample.vcu, &cfg.codec, cfg.decoupled).map_err(err)?;
    let shape = bundle.x_c.tensor().shape().to_vec();
    let numel = bundle.x_c.tensor().numel();
    let mut noise = vec![0.0f32; numel];
    Rng::new(31).fill_normal(&mut noise);
    let x_t = LatentGrid::new(Tensor::from_vec(&shape, noise).map_err(err)?).map_err(err)?;
    let mut vdata = vec![0.0f32; numel];
    Rng::new(32).fill_normal(&mut vdata);
    let v = LatentGrid::new(Tensor::from_vec(&shape, vdata).map_err(err)?).map_err(err)?;
    let grid = TokenGrid::from_latent(&x_t, bundle.ref_latent_len, &cfg).map_err(err)?;
    let v_tokens = patch_tokens(&v, &grid);
    let ids = text_tokens(sample.vcu.prompt(), &cfg);
    let t = 0.5;

    let built = build_loss::<f64>(&params, &cfg, &bundle, &x_t, &v_tokens, &ids, t, None)
        .map_err(err)?;
    let table = built.graph.backward(built.loss).map_err(err)?;

    let names: Vec<String> = built.leaves.keys().cloned().collect();
    let probes = [0, names.len() / 2, names.len() - 1];
    let eps = 1e-4;
    for &pi in &probes {
        let name = &names[pi];
        let var = built.leaves[name];
        let analytic: Vec<f64> = table
            .get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; built.graph.value(var).len()]);
        let base: Vec<f64> = params
            .get(name)
            .map_err(err)?
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let idxs = [0, base.len() / 2, base.len() - 1];
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idxs {
            let mut overrides = BTreeMap::new();
            let mut point = base.clone();
            point[i] += eps;
            overrides.insert(name.clone(), point.clone());
            let plus = loss_at(&params, &cfg, &bundle, &x_t, &v_tokens, &ids, t, &overrides)?;
            point[i] = base[i] - eps;
            overrides.insert(name.clone(), point);
            let minus = loss_at(&params, &cfg, &bundle, &x_t, &v_tokens, &ids, t, &overrides)?;
            a.push(analytic[i]);
            n.push((plus - minus) / (2.0 * eps));
        }
        let rel = max_rel_error(&a, &n);
        if rel > 1e-3 {
            return Err(format!("{name}: gradient relative error {rel}"));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn loss_at(
    params: &vidit_core::ParamStore,
    cfg: &ModelConfig,
    bundle: &vidit_core::LatentBundle,
    x_t: &LatentGrid,
    v_tokens: &Tensor,
    ids: &[usize],
    t: f64,
    overrides: &BTreeMap<String, Vec<f64>>,
) -> Result<f64, String> {
    let built = build_loss::<f64>(params, cfg, bundle, x_t, v_tokens, ids, t, Some(overrides))
        .map_err(err)?;
    Ok(built.graph.value(built.loss)[0])
}

fn checkpoint_roundtrip() -> Result<(), String> {
    let dir = scratch_dir("ckpt");
    let cfg = tiny_model(Mode::Adapter);
    let train = TrainConfig::default();
    let state = TrainState::init(&cfg, &train).map_err(err)?;
    let ckpt = Checkpoint::from_state(&state, &cfg, &train);
    let path = dir.join("model.ckpt");
    checkpoint::save(&ckpt, &path).map_err(err)?;
    let back = checkpoint::load(&path).map_err(err)?;
    let sample = make_sample(TaskKind::T2v, 2, &tiny_geom()).map_err(err)?;
    let a = probe_loss(&ckpt.params, &ckpt.model, &sample, 5).map_err(err)?;
    let b = probe_loss(&back.params, &back.model, &sample, 5).map_err(err)?;
    let again = dir.join("again.ckpt");
    checkpoint::save(&back, &again).map_err(err)?;
    let first = std::fs::read(&path).map_err(err)?;
    let second = std::fs::read(&again).map_err(err)?;
    let fixpoint = first == second;
    let _ = std::fs::remove_dir_all(&dir);
    if a.to_bits() != b.to_bits() {
        return Err("loaded checkpoint changes probe loss".into());
    }
    if !fixpoint {
        return Err("save(load(ckpt)) bytes differ".into());
    }
    Ok(())
}

fn dataset_roundtrip() -> Result<(), String> {
    let dir = scratch_dir("data");
    let geom = tiny_geom();
    let samples: Vec<_> = TaskKind::ALL
        .iter()
        .map(|&k| make_sample(k, 40, &geom).unwrap())
        .collect();
    write_dataset(&samples, &dir).map_err(err)?;
    let back = read_dataset(&dir).map_err(err)?;
    let _ = std::fs::remove_dir_all(&dir);
    if back.len() != samples.len() {
        return Err("count changed across the container".into());
    }
    for (a, b) in samples.iter().zip(&back) {
        if !a.vcu.frames().tensor().bit_eq(b.vcu.frames().tensor())
            || !a.target.tensor().bit_eq(b.target.tensor())
            || a.seed != b.seed
        {
            return Err(format!("{} record changed across the container", a.task_tag()));
        }
    }
    Ok(())
}

fn sampler_shapes() -> Result<(), String> {
    let cfg = tiny_model(Mode::Adapter);
    let params = init_params(&cfg, &mut Rng::new(13)).map_err(err)?;
    let (n, h, w) = (4, 16, 16);
    for l in 0usize..=2 {
        let vcu = if l == 0 {
            make_t2v("p", n, h, w).map_err(err)?
        } else {
            let mut rng = Rng::new(l as u64);
            make_r2v("p", &random_video(l, h, w, &mut rng), n).map_err(err)?
        };
        let out = euler_sample(
            &params,
            &cfg,
            &vcu,
            &SampleConfig {
                steps: 2,
                guide: 1.0,
                seed: 0,
                ..SampleConfig::default()
            },
        )
        .map_err(err)?;
        if (out.count(), out.height(), out.width()) != (n, h, w) {
            return Err(format!(
                "l={l}: output is ({}, {}, {}), want ({n}, {h}, {w})",
                out.count(),
                out.height(),
                out.width()
            ));
        }
    }
    Ok(())
}

fn eval_determinism() -> Result<(), String> {
    let cfg = tiny_model(Mode::Adapter);
    let train = TrainConfig::default();
    let state = TrainState::init(&cfg, &train).map_err(err)?;
    let ckpt = Checkpoint::from_state(&state, &cfg, &train);
    let geom = tiny_geom();
    let valset = vec![
        make_sample(TaskKind::Mv2vInpaint, 1, &geom).map_err(err)?,
        make_sample(TaskKind::T2v, 2, &geom).map_err(err)?,
    ];
    let opts = EvalOptions {
        sampler_steps: 2,
        guide: 1.0,
    };
    let a = eval::eval(&ckpt, &valset, &opts).map_err(err)?;
    let b = eval::eval(&ckpt, &valset, &opts).map_err(err)?;
    if eval::render_tsv(&a) != eval::render_tsv(&b) {
        return Err("repeated eval produced different tables".into());
    }
    Ok(())
}
