//! Controlled comparison grids.
//!
//! One axis varies a single design choice; every arm trains on the same
//! dataset with the same seed and step budget, so curves differ only
//! through the choice under study. Data identity is enforced by hashing
//! the samples each arm consumes and comparing digests.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, PlacementSpec};
use crate::train::{fit, EvalPoint, TaskEval, TrainConfig, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Full fine-tuning vs the frozen-backbone adapter.
    Structure,
    /// Context-block placement: first-k vs evenly spread, several k.
    Placement,
    /// Split given/generated content into two streams, or collapse them.
    Decouple,
    /// Time-warp strength during training.
    Shift,
    /// Prompt-dropout probability.
    Pzero,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Structure,
        Axis::Placement,
        Axis::Decouple,
        Axis::Shift,
        Axis::Pzero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Structure => "structure",
            Axis::Placement => "placement",
            Axis::Decouple => "decouple",
            Axis::Shift => "shift",
            Axis::Pzero => "pzero",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::arg("axis", format!("unknown axis {s:?}")))
    }
}

/// One configured arm of a comparison.
#[derive(Clone, Debug)]
pub struct ArmSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The arms an axis compares, derived from a base configuration.
pub fn arms_for(axis: Axis, base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<ArmSpec> {
    let arm = |name: String, model: ModelConfig, train: TrainConfig| ArmSpec { name, model, train };
    match axis {
        Axis::Structure => [Mode::FullFt, Mode::Adapter]
            .into_iter()
            .map(|mode| {
                arm(
                    mode.to_string(),
                    ModelConfig {
                        mode,
                        ..base_model.clone()
                    },
                    base_train.clone(),
                )
            })
            .collect(),
        Axis::Placement => {
            let l = base_model.layers;
            let mut ks: Vec<usize> = [l / 4, l / 2, l].into_iter().filter(|&k| k > 0).collect();
            ks.dedup();
            let mut arms = Vec::new();
            for k in ks {
                for (label, placement) in [
                    ("continuous", PlacementSpec::ContinuousFirst(k)),
                    ("distributed", PlacementSpec::DistributedEven(k)),
                ] {
                    arms.push(arm(
                        format!("{label}_k{k}"),
                        ModelConfig {
                            mode: Mode::Adapter,
                            placement,
                            ..base_model.clone()
                        },
                        base_train.clone(),
                    ));
                }
            }
            arms
        }
        Axis::Decouple => [("decouple_on", true), ("decouple_off", false)]
            .into_iter()
            .map(|(name, decoupled)| {
                arm(
                    name.to_string(),
                    ModelConfig {
                        decoupled,
                        ..base_model.clone()
                    },
                    base_train.clone(),
                )
            })
            .collect(),
        Axis::Shift => [1.0, 3.0]
            .into_iter()
            .map(|shift| {
                arm(
                    format!("shift_{shift}"),
                    base_model.clone(),
                    TrainConfig {
                        shift,
                        ..base_train.clone()
                    },
                )
            })
            .collect(),
        Axis::Pzero => [0.0, 0.1, 0.3]
            .into_iter()
            .map(|p_zero| {
                arm(
                    format!("pzero_{p_zero}"),
                    base_model.clone(),
                    TrainConfig {
                        p_zero,
                        ..base_train.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Hex SHA-256 over the dataset's record encoding; identifies the exact
/// training stream an arm consumed.
pub fn dataset_digest(samples: &[TrainSample]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in samples {
        h.update(crate::datagen::io::encode_record(s));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One arm trained under one seed.
#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub arm: String,
    pub seed: u64,
    pub data_digest: String,
    /// Held-out loss curve, one point per evaluation step.
    pub curve: Vec<EvalPoint>,
    /// Per-task means at the final step.
    pub final_tasks: BTreeMap<String, TaskEval>,
    /// Count-weighted mean across tasks at the final step.
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AblateReport {
    pub axis: Axis,
    pub outcomes: Vec<ArmOutcome>,
    /// Median of final_loss across seeds, per arm.
    pub medians: BTreeMap<String, f64>,
    pub data_digest: String,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable losses"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn weighted_mean(tasks: &BTreeMap<String, TaskEval>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for e in tasks.values() {
        sum += e.mean_loss * e.count as f64;
        count += e.count;
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn ablate(
    axis: Axis,
    seeds: &[u64],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    dataset: &[TrainSample],
) -> Result<AblateReport> {
    if seeds.is_empty() {
        return Err(Error::arg("ablate", "need at least one seed"));
    }
    if dataset.is_empty() {
        return Err(Error::arg("ablate", "empty dataset"));
    }
    let digest = dataset_digest(dataset);
    let arms = arms_for(axis, base_model, base_train);
    let mut outcomes = Vec::new();
    for spec in &arms {
        for &seed in seeds {
            let mut train = spec.train.clone();
            train.seed = seed;
            if train.eval_every == 0 {
                train.eval_every = (train.steps / 10).max(1);
            }
            let arm_digest = dataset_digest(dataset);
            if arm_digest != digest {
                return Err(Error::arg(
                    "ablate",
                    format!("arm {} saw a different data stream", spec.name),
                ));
            }
            let result = fit(&spec.model, &train, dataset)?;
            let last = result
                .eval
                .last()
                .ok_or_else(|| Error::arg("ablate", "training produced no evaluation points"))?;
            outcomes.push(ArmOutcome {
                arm: spec.name.clone(),
                seed,
                data_digest: arm_digest,
                curve: result.eval.clone(),
                final_tasks: last.tasks.clone(),
                final_loss: weighted_mean(&last.tasks),
            });
        }
    }
    let mut medians = BTreeMap::new();
    for spec in &arms {
        let finals: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.arm == spec.name)
            .map(|o| o.final_loss)
            .collect();
        medians.insert(spec.name.clone(), median(&finals));
    }
    Ok(AblateReport {
        axis,
        outcomes,
        medians,
        data_digest: digest,
    })
}

/// Tab-separated rendering. Row kinds, in order:
///   `digest <arm> <seed> <hex>` data identity per trained arm;
///   `curve <arm> <seed> <step> <task> <count> <mean_loss>`;
///   `final <arm> <seed> <task> <count> <mean_loss>`;
///   `arm_final <arm> <seed> <weighted_mean>`;
///   `median <arm> <value>`.
pub fn render_tsv(report: &AblateReport) -> String {
    let mut out = String::new();
    for o in &report.outcomes {
        out.push_str(&format!("digest\t{}\t{}\t{}\n", o.arm, o.seed, o.data_digest));
    }
    for o in &report.outcomes {
        for point in &o.curve {
            for (task, e) in &point.tasks {
                out.push_str(&format!(
                    "curve\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    o.arm, o.seed, point.step, task, e.count, e.mean_loss
                ));
            }
        }
    }
    for o in &report.outcomes {
        for (task, e) in &o.final_tasks {
            out.push_str(&format!(
                "final\t{}\t{}\t{}\t{}\t{}\n",
                o.arm, o.seed, task, e.count, e.mean_loss
            ));
        }
        out.push_str(&format!(
            "arm_final\t{}\t{}\t{}\n",
            o.arm, o.seed, o.final_loss
        ));
    }
    for (arm, m) in &report.medians {
        out.push_str(&format!("median\t{arm}\t{m}\n"));
    }
    out
}

pub fn render_text(report: &AblateReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("ablation axis: {}\n", report.axis));
    out.push_str(&format!("data digest: {}\n", report.data_digest));
    if report.axis == Axis::Decouple {
        out.push_str(
            "decouple_off routes all frame content through the reactive stream with the \
             inactive stream zeroed\n",
        );
    }
    out.push_str("median final losses:\n");
    for (arm, m) in &report.medians {
        out.push_str(&format!("  {arm}: {m:.6}\n"));
    }
    out.push_str("per-seed finals:\n");
    for o in &report.outcomes {
        out.push_str(&format!("  {} seed {}: {:.6}\n", o.arm, o.seed, o.final_loss));
    }
    if report.axis == Axis::Placement {
        out.push_str("per-seed placement direction (distributed - continuous):\n");
        let mut by_key: BTreeMap<(String, u64), f64> = BTreeMap::new();
        for o in &report.outcomes {
            by_key.insert((o.arm.clone(), o.seed), o.final_loss);
        }
        let ks: std::collections::BTreeSet<String> = report
            .outcomes
            .iter()
            .filter_map(|o| o.arm.split("_k").nth(1).map(str::to_string))
            .collect();
        let seeds: std::collections::BTreeSet<u64> =
            report.outcomes.iter().map(|o| o.seed).collect();
        for k in &ks {
            for &seed in &seeds {
                let c = by_key.get(&(format!("continuous_k{k}"), seed));
                let d = by_key.get(&(format!("distributed_k{k}"), seed));
                if let (Some(c), Some(d)) = (c, d) {
                    let sign = if d < c {
                        "distributed better"
                    } else if c < d {
                        "continuous better"
                    } else {
                        "tie"
                    };
                    out.push_str(&format!("  k={k} seed {seed}: {:+.6} ({sign})\n", d - c));
                }
            }
        }
    }
    out
}
