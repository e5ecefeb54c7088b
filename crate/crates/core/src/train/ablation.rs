//! Loss ablation arms trained on shared data and seeds.

use serde::{Deserialize, Serialize};

use super::{evaluate, train, Component, ExperimentConfig, ExperimentData, MetricsReport};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::synth::LabeledScan;
use crate::topology::TopologySchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "-lp")]
    NoLp,
    #[serde(rename = "-to")]
    NoTo,
    #[serde(rename = "-bc")]
    NoBc,
    #[serde(rename = "-rec")]
    NoRec,
    #[serde(rename = "+triplet")]
    PlusTriplet,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Full, Arm::NoLp, Arm::NoTo, Arm::NoBc, Arm::NoRec, Arm::PlusTriplet];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoLp => "-lp",
            Arm::NoTo => "-to",
            Arm::NoBc => "-bc",
            Arm::NoRec => "-rec",
            Arm::PlusTriplet => "+triplet",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown arm {s:?}")))
    }

    /// The base configuration with this arm's loss toggled.
    pub fn configure(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Full => {}
            Arm::NoLp => cfg.losses.set(Component::Lp, false),
            Arm::NoTo => cfg.losses.set(Component::To, false),
            Arm::NoBc => cfg.losses.set(Component::Bc, false),
            Arm::NoRec => cfg.losses.set(Component::Rec, false),
            Arm::PlusTriplet => cfg.losses.set(Component::Triplet, true),
        }
        cfg
    }
}

pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub test: MetricsReport,
    /// Metrics on the lesioned part of the test split.
    pub lesioned: MetricsReport,
    pub best_step: usize,
    pub steps: usize,
    pub order_digest: u64,
    pub model: Model,
}

/// Trains every `(arm, seed)` pair on the same splits and evaluates on the
/// test split. Results come back in arm-major order.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    schema: &TopologySchema,
    data: &ExperimentData,
    arms: &[Arm],
    seeds: &[u64],
) -> Result<Vec<ArmResult>> {
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let lesioned: Vec<LabeledScan> = data.test.iter().filter(|s| s.has_lesion()).cloned().collect();
    let axial = base.scene.axial_um;
    let run = |&(arm, seed): &(Arm, u64)| -> Result<ArmResult> {
        let cfg = arm.configure(base);
        log::info!("arm {} seed {seed}", arm.name());
        let out = train(&cfg, schema, &data.train, &data.unlabeled, &data.val, seed)?;
        let (test, _) = evaluate(&out.model, &data.test, schema, axial)?;
        let (les, _) = evaluate(&out.model, &lesioned, schema, axial)?;
        Ok(ArmResult {
            arm,
            seed,
            test,
            lesioned: les,
            best_step: out.best_step,
            steps: out.steps,
            order_digest: out.order_digest,
            model: out.model,
        })
    };
    par::map_slice(&jobs, run).into_iter().collect()
}

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut out = String::from(
        "arm,seed,mad_total_um,mad_lesioned_um,dice_total,dice_smoothed_total,ordering_violations,confinement_violations,best_step,steps,order_digest\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:016x}\n",
            r.arm.name(),
            r.seed,
            r.test.mad_total_um,
            r.lesioned.mad_total_um,
            r.test.dice_total,
            r.test.dice_smoothed_total,
            r.test.ordering_violations,
            r.test.confinement_violations,
            r.best_step,
            r.steps,
            r.order_digest
        ));
    }
    out
}
