//! Component ablation and phase-split sweeps on a shared starting model.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, pretrain, progressive_train, train_phase, Handoff, Init, TraceRow, TrainSchedule};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{ViTConfig, VisionTransformer};
use crate::quantization::policy::{PolicySpec, WeightBits};
use crate::quantization::Granularity;

/// Training pipelines compared by the component ablation, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    RealValued,
    LayerWise,
    ChannelWise,
    LayerWisePt,
    ChannelWisePt,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Pipeline::RealValued,
        Pipeline::LayerWise,
        Pipeline::ChannelWise,
        Pipeline::LayerWisePt,
        Pipeline::ChannelWisePt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pipeline::RealValued => "real-valued",
            Pipeline::LayerWise => "layer-wise",
            Pipeline::ChannelWise => "channel-wise",
            Pipeline::LayerWisePt => "layer-wise + PT",
            Pipeline::ChannelWisePt => "channel-wise + PT",
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Pipeline::LayerWise | Pipeline::LayerWisePt => Granularity::LayerWise,
            _ => Granularity::ChannelWise,
        }
    }

    pub fn progressive(self) -> bool {
        matches!(self, Pipeline::LayerWisePt | Pipeline::ChannelWisePt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub pipeline: Pipeline,
    /// Train loss of the starting model under the pipeline's first policy.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_eval_acc: Option<f64>,
    pub epochs: usize,
    pub trace: Vec<TraceRow>,
    pub handoff: Option<Handoff>,
}

impl PipelineResult {
    /// `1 − final/initial`.
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

/// Freshly initialized model (seeded by the schedule) after the optional
/// real-valued pretraining.
pub fn pipeline_model(
    config: &ViTConfig,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<(VisionTransformer, Vec<TraceRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut model = VisionTransformer::new(config.clone(), &mut rng)?;
    let trace = pretrain(&mut model, schedule, data, eval)?;
    Ok((model, trace))
}

/// Runs one pipeline from `start` for `schedule.total_epochs()` epochs.
/// Non-progressive pipelines spend every epoch in their final mode.
pub fn run_pipeline(
    pipeline: Pipeline,
    start: &VisionTransformer,
    base: &PolicySpec,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<PipelineResult> {
    let config = &start.config;
    let total = schedule.total_epochs();
    let mut model = start.clone();
    let bs = schedule.batch_size;

    if pipeline == Pipeline::RealValued {
        let real = config.policy(&PolicySpec::real32())?;
        let initial_loss = evaluate(&model, &real, data, bs)?.0;
        let trace = train_phase(&mut model, &real, "real32", schedule, data, eval)?;
        return finish(
            pipeline,
            &model,
            &real,
            initial_loss,
            total,
            trace,
            None,
            data,
            eval,
            bs,
        );
    }

    let spec = PolicySpec {
        granularity: pipeline.granularity(),
        body_bits: WeightBits::Ternary,
        ..base.clone()
    };
    let target = config.policy(&spec)?;
    if pipeline.progressive() {
        let first = if schedule.phase_a_epochs > 0 {
            target.ternary_as_int8()
        } else {
            target.clone()
        };
        let initial_loss = evaluate(&model, &first, data, bs)?.0;
        let out = progressive_train(&mut model, &target, schedule, data, eval)?;
        let trace = out.trace();
        finish(
            pipeline,
            &model,
            &target,
            initial_loss,
            total,
            trace,
            out.handoff,
            data,
            eval,
            bs,
        )
    } else {
        let initial_loss = evaluate(&model, &target, data, bs)?.0;
        let flat = TrainSchedule {
            phase_a_epochs: 0,
            phase_b_epochs: total,
            ..schedule.clone()
        };
        let trace = train_phase(&mut model, &target, "ternary", &flat, data, eval)?;
        finish(
            pipeline,
            &model,
            &target,
            initial_loss,
            total,
            trace,
            None,
            data,
            eval,
            bs,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    pipeline: Pipeline,
    model: &VisionTransformer,
    policy: &crate::quantization::QuantizationPolicy,
    initial_loss: f64,
    epochs: usize,
    trace: Vec<TraceRow>,
    handoff: Option<Handoff>,
    data: &Dataset,
    eval: Option<&Dataset>,
    bs: usize,
) -> Result<PipelineResult> {
    let (final_loss, final_train_acc) = evaluate(model, policy, data, bs)?;
    let final_eval_acc = match eval {
        Some(e) => Some(evaluate(model, policy, e, bs)?.1),
        None => None,
    };
    Ok(PipelineResult {
        pipeline,
        initial_loss,
        final_loss,
        final_train_acc,
        final_eval_acc,
        epochs,
        trace,
        handoff,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub pretrain: Vec<TraceRow>,
    pub rows: Vec<PipelineResult>,
}

impl AblationReport {
    pub fn row(&self, pipeline: Pipeline) -> Option<&PipelineResult> {
        self.rows.iter().find(|r| r.pipeline == pipeline)
    }
}

/// All five pipelines from one shared starting model with identical budgets.
pub fn ablation_suite(
    config: &ViTConfig,
    base: &PolicySpec,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<AblationReport> {
    let (start, pretrain) = pipeline_model(config, schedule, data, eval)?;
    let rows = Pipeline::ALL
        .iter()
        .map(|&p| run_pipeline(p, &start, base, schedule, data, eval))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { pretrain, rows })
}

pub fn format_ablation_table(report: &AblationReport) -> String {
    let mut out = String::from("method,epochs,initial_loss,final_loss,train_acc,eval_acc\n");
    for r in &report.rows {
        let eval = r.final_eval_acc.map(|a| format!("{a:.4}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.4},{}",
            r.pipeline.label(),
            r.epochs,
            r.initial_loss,
            r.final_loss,
            r.final_train_acc,
            eval
        );
    }
    out
}

/// One column of the phase-split comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub setup: String,
    pub final_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

/// "From scratch", "from real-valued" and each `(a, b)` split, all with
/// channel-wise ternarization and the same total budget as `schedule`.
pub fn split_sweep(
    config: &ViTConfig,
    base: &PolicySpec,
    schedule: &TrainSchedule,
    splits: &[(usize, usize)],
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<SplitResult>> {
    let total = schedule.total_epochs();
    let mut out = Vec::new();
    let spec = PolicySpec {
        granularity: Granularity::ChannelWise,
        body_bits: WeightBits::Ternary,
        ..base.clone()
    };
    let target = config.policy(&spec)?;
    let bs = schedule.batch_size;
    let mut push = |setup: String, model: &VisionTransformer| -> Result<()> {
        let (final_loss, train_acc) = evaluate(model, &target, data, bs)?;
        let eval_acc = match eval {
            Some(e) => Some(evaluate(model, &target, e, bs)?.1),
            None => None,
        };
        out.push(SplitResult {
            setup,
            final_loss,
            train_acc,
            eval_acc,
        });
        Ok(())
    };

    let scratch_schedule = TrainSchedule {
        init: Init::Scratch,
        phase_a_epochs: 0,
        phase_b_epochs: total,
        ..schedule.clone()
    };
    let (mut scratch, _) = pipeline_model(config, &scratch_schedule, data, eval)?;
    train_phase(&mut scratch, &target, "ternary", &scratch_schedule, data, eval)?;
    push("from scratch".into(), &scratch)?;

    let (start, _) = pipeline_model(config, schedule, data, eval)?;
    for &(a, b) in std::iter::once(&(0, total)).chain(splits) {
        let s = TrainSchedule {
            phase_a_epochs: a,
            phase_b_epochs: b,
            ..schedule.clone()
        };
        let mut model = start.clone();
        progressive_train(&mut model, &target, &s, data, eval)?;
        let setup = if a == 0 {
            "from real-valued".to_string()
        } else {
            format!("({a};{b})")
        };
        push(setup, &model)?;
    }
    Ok(out)
}

pub fn format_split_table(rows: &[SplitResult]) -> String {
    let mut out = String::from("setup,final_loss,train_acc,eval_acc\n");
    for r in rows {
        let eval = r.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{:.4},{}", r.setup, r.final_loss, r.train_acc, eval);
    }
    out
}
