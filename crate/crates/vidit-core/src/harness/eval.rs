//! Deterministic validation metrics.
//!
//! Losses are probed at fixed times with per-sample noise seeds, so a
//! report is a pure function of (checkpoint, validation set). Masked-edit
//! samples are additionally sampled end-to-end to measure how well the
//! generated video preserves pixels the mask marked as given
//! (`psnr_inactive`) and how much it flickers frame to frame.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sampler::{euler_sample, SampleConfig};
use crate::train::{probe_loss, TaskEval, TrainSample};
use crate::vcu::{FrameSeq, MaskSeq, TaskTag};

use super::checkpoint::{config_digest, Checkpoint};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Euler steps for the sampled-output metrics.
    pub sampler_steps: usize,
    pub guide: f64,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions {
            sampler_steps: 10,
            guide: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Mean probe loss per task tag; every tag in the valset appears once.
    pub tasks: BTreeMap<String, TaskEval>,
    pub total_count: usize,
    /// Mean over masked-edit samples of 10*log10(4/mse) on pixels whose
    /// mask is 0, capped at 99 dB. Absent when nothing was sampled.
    pub psnr_inactive: Option<f64>,
    pub psnr_count: usize,
    /// Mean absolute inter-frame difference over the sampled outputs.
    pub flicker: Option<f64>,
    pub config_digest: String,
}

/// Mean squared error between generated and given pixels restricted to
/// mask==0, mapped to dB over the [-1, 1] signal range (peak-to-peak 2,
/// hence 4 in the numerator). `None` when the mask never releases a pixel.
pub fn psnr_inactive_db(out: &FrameSeq, source: &FrameSeq, masks: &MaskSeq) -> Option<f64> {
    let (n, h, w) = (out.count(), out.height(), out.width());
    assert_eq!(
        (n, h, w),
        (source.count(), source.height(), source.width()),
        "psnr operands must agree"
    );
    assert_eq!((n, h, w), (masks.count(), masks.height(), masks.width()));
    let o = out.tensor().data();
    let s = source.tensor().data();
    let m = masks.tensor().data();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..n * h * w {
        if m[i] != 0.0 {
            continue;
        }
        for c in 0..3 {
            let d = (o[i * 3 + c] - s[i * 3 + c]) as f64;
            acc += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return None;
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Some(99.0);
    }
    Some((10.0 * (4.0 / mse).log10()).min(99.0))
}

/// Mean absolute difference between consecutive frames; 0 for a single
/// frame or a constant video.
pub fn mean_flicker(frames: &FrameSeq) -> f64 {
    let n = frames.count();
    if n < 2 {
        return 0.0;
    }
    let stride = frames.height() * frames.width() * 3;
    let d = frames.tensor().data();
    let mut acc = 0.0f64;
    for t in 1..n {
        for i in 0..stride {
            acc += (d[t * stride + i] - d[(t - 1) * stride + i]).abs() as f64;
        }
    }
    acc / ((n - 1) * stride) as f64
}

pub fn eval(ckpt: &Checkpoint, valset: &[TrainSample], opts: &EvalOptions) -> Result<EvalReport> {
    if valset.is_empty() {
        return Err(Error::arg("eval", "empty validation set"));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for sample in valset {
        let loss = probe_loss(&ckpt.params, &ckpt.model, sample, sample.seed)?;
        let slot = sums.entry(sample.task_tag().to_string()).or_insert((0.0, 0));
        slot.0 += loss;
        slot.1 += 1;
    }
    let tasks: BTreeMap<String, TaskEval> = sums
        .into_iter()
        .map(|(tag, (sum, count))| {
            (
                tag,
                TaskEval {
                    mean_loss: sum / count as f64,
                    count,
                },
            )
        })
        .collect();

    let mut psnr_sum = 0.0f64;
    let mut psnr_count = 0usize;
    let mut flicker_sum = 0.0f64;
    let mut sampled = 0usize;
    for sample in valset {
        if sample.task_tag() != &TaskTag::MV2V {
            continue;
        }
        let cfg = SampleConfig {
            steps: opts.sampler_steps,
            guide: opts.guide,
            seed: sample.seed,
            ..SampleConfig::default()
        };
        let out = euler_sample(&ckpt.params, &ckpt.model, &sample.vcu, &cfg)?;
        flicker_sum += mean_flicker(&out);
        sampled += 1;
        let source = sample.vcu.video_frames();
        let masks = sample.vcu.video_masks();
        if let Some(db) = psnr_inactive_db(&out, &source, &masks) {
            psnr_sum += db;
            psnr_count += 1;
        }
    }

    Ok(EvalReport {
        tasks,
        total_count: valset.len(),
        psnr_inactive: (psnr_count > 0).then(|| psnr_sum / psnr_count as f64),
        psnr_count,
        flicker: (sampled > 0).then(|| flicker_sum / sampled as f64),
        config_digest: config_digest(&ckpt.model, &ckpt.train),
    })
}

/// Tab-separated rendering. Row kinds, in order:
///   `loss <task> <count> <mean_loss>` for every task;
///   `psnr_inactive <count> <dB or ->`;
///   `flicker <value or ->`;
///   `samples <total>`;
///   `config_digest <hex>`.
pub fn render_tsv(report: &EvalReport) -> String {
    let mut out = String::new();
    for (task, e) in &report.tasks {
        out.push_str(&format!("loss\t{task}\t{}\t{}\n", e.count, e.mean_loss));
    }
    out.push_str(&match report.psnr_inactive {
        Some(v) => format!("psnr_inactive\t{}\t{v}\n", report.psnr_count),
        None => format!("psnr_inactive\t{}\t-\n", report.psnr_count),
    });
    out.push_str(&match report.flicker {
        Some(v) => format!("flicker\t{v}\n"),
        None => "flicker\t-\n".to_string(),
    });
    out.push_str(&format!("samples\t{}\n", report.total_count));
    out.push_str(&format!("config_digest\t{}\n", report.config_digest));
    out
}

pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("validation report\n");
    out.push_str(&format!(
        "  samples: {} across {} tasks\n",
        report.total_count,
        report.tasks.len()
    ));
    for (task, e) in &report.tasks {
        out.push_str(&format!(
            "  {task}: mean loss {:.6} over {} samples\n",
            e.mean_loss, e.count
        ));
    }
    match report.psnr_inactive {
        Some(v) => out.push_str(&format!(
            "  psnr_inactive: {v:.2} dB over {} sampled edits\n",
            report.psnr_count
        )),
        None => out.push_str("  psnr_inactive: no masked-edit samples\n"),
    }
    match report.flicker {
        Some(v) => out.push_str(&format!("  flicker: {v:.6}\n")),
        None => out.push_str("  flicker: no sampled outputs\n"),
    }
    out.push_str(&format!("  config digest: {}\n", report.config_digest));
    out
}
