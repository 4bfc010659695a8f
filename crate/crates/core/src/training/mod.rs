//! Quantization-aware training: AdamW on latent real-valued weights, with
//! the quantizers re-applied from the latents on every forward pass.

mod ablation;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::VisionTransformer;
use crate::quantization::policy::QuantizationPolicy;

pub use ablation::{
    ablation_suite, format_ablation_table, format_split_table, pipeline_model, run_pipeline, split_sweep,
    AblationReport, Pipeline, PipelineResult, SplitResult,
};
pub use optim::{cosine_lr, decays, AdamW, AdamWState, Moments};

pub const TRACE_HEADER: &str = "phase,epoch,train_loss,train_acc,eval_acc";

/// Where quantized fine-tuning starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// A real-valued model, trained for `pretrain_epochs` before quantization.
    #[default]
    RealValued,
    /// Random initialization, quantized from the first step.
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    /// Epochs of 8-bit proxy training.
    #[serde(default)]
    pub phase_a_epochs: usize,
    /// Epochs of ternary training.
    pub phase_b_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
    /// Real-valued epochs that produce the starting model when `init` is
    /// `real-valued`.
    #[serde(default)]
    pub pretrain_epochs: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_wd() -> f64 {
    0.05
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

fn default_batch() -> usize {
    32
}

fn default_seed() -> u64 {
    42
}

impl TrainSchedule {
    pub fn new(phase_a_epochs: usize, phase_b_epochs: usize) -> Self {
        Self {
            phase_a_epochs,
            phase_b_epochs,
            lr: default_lr(),
            weight_decay: default_wd(),
            betas: default_betas(),
            eps: default_eps(),
            batch_size: default_batch(),
            seed: default_seed(),
            init: Init::RealValued,
            pretrain_epochs: 0,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase_a_epochs + self.phase_b_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be a positive integer"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("schedule.lr", "must be a nonnegative number"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("schedule.weight_decay", "must be a nonnegative number"));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("schedule.betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("schedule.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.betas[0], self.betas[1], self.eps, self.weight_decay)
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let eval = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.8},{:.6},{}",
            r.phase, r.epoch, r.train_loss, r.train_acc, eval
        );
    }
    out
}

/// Loss and accuracy of `model` over a whole dataset.
pub fn evaluate(
    model: &VisionTransformer,
    policy: &QuantizationPolicy,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let s = model.evaluate_batch(&x, &y, policy)?;
        loss += s.loss * s.count as f64;
        correct += s.correct;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Result of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub rows: Vec<TraceRow>,
    /// Parameter digest before the first update.
    pub start_digest: [u8; 32],
    pub end_digest: [u8; 32],
}

/// Drives the optimizer across one or more phases that share a learning-rate
/// schedule and optimizer state.
pub struct Trainer<'a> {
    schedule: &'a TrainSchedule,
    data: &'a Dataset,
    eval: Option<&'a Dataset>,
    opt: AdamW,
    step: usize,
    total_steps: usize,
    epoch: usize,
    stream_base: u64,
}

impl<'a> Trainer<'a> {
    /// A trainer whose cosine schedule spans `total_epochs`.
    pub fn new(
        schedule: &'a TrainSchedule,
        data: &'a Dataset,
        eval: Option<&'a Dataset>,
        total_epochs: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        let steps_per_epoch = data.len().div_ceil(schedule.batch_size);
        Ok(Self {
            schedule,
            data,
            eval,
            opt: schedule.optimizer(),
            step: 0,
            total_steps: total_epochs * steps_per_epoch,
            epoch: 0,
            stream_base: 1 << 32,
        })
    }

    /// Uses a separate family of shuffling streams (for pretraining runs).
    fn with_stream_base(mut self, base: u64) -> Self {
        self.stream_base = base;
        self
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn into_optimizer(self) -> AdamW {
        self.opt
    }

    pub fn run_phase(
        &mut self,
        model: &mut VisionTransformer,
        policy: &QuantizationPolicy,
        phase: &str,
        epochs: usize,
    ) -> Result<PhaseReport> {
        let start_digest = model.parameter_digest();
        let mut rows = Vec::with_capacity(epochs);
        let n = self.data.len();
        for _ in 0..epochs {
            self.epoch += 1;
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed);
            rng.set_stream(self.stream_base + self.epoch as u64);
            order.shuffle(&mut rng);

            let (mut loss_sum, mut correct) = (0.0, 0);
            for (b, chunk) in order.chunks(self.schedule.batch_size).enumerate() {
                let (x, y) = self.data.batch(chunk);
                model.zero_grad();
                let stats = model.loss_and_backward(&x, &y, policy)?;
                if !stats.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        phase: phase.to_string(),
                        epoch: self.epoch,
                        step: b,
                        dump: dump_state(model, chunk, stats.loss),
                    });
                }
                let lr = cosine_lr(self.schedule.lr, self.step, self.total_steps);
                self.opt.step(model.named_parameters_mut(), lr)?;
                self.step += 1;
                loss_sum += stats.loss * stats.count as f64;
                correct += stats.correct;
            }
            let eval_acc = match self.eval {
                Some(e) => Some(evaluate(model, policy, e, self.schedule.batch_size)?.1),
                None => None,
            };
            rows.push(TraceRow {
                phase: phase.to_string(),
                epoch: self.epoch,
                train_loss: loss_sum / n as f64,
                train_acc: correct as f64 / n as f64,
                eval_acc,
            });
        }
        Ok(PhaseReport {
            rows,
            start_digest,
            end_digest: model.parameter_digest(),
        })
    }
}

fn dump_state(model: &VisionTransformer, batch: &[usize], loss: f64) -> String {
    let mut out = format!("loss = {loss}\nbatch samples = {batch:?}\n");
    for (name, p) in model.named_parameters() {
        let max = p.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
        let bad = p.data().iter().filter(|v| !v.is_finite()).count();
        let gmax = p
            .grad()
            .map(|g| g.iter().fold(0.0f32, |a, v| a.max(v.abs())))
            .unwrap_or(0.0);
        let _ = writeln!(out, "{name}: max|w| = {max:e}, non-finite = {bad}, max|g| = {gmax:e}");
    }
    out
}

/// Trains `model` under a single policy for `schedule.total_epochs()`.
pub fn train_phase(
    model: &mut VisionTransformer,
    policy: &QuantizationPolicy,
    phase: &str,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<TraceRow>> {
    let total = schedule.total_epochs();
    let mut trainer = Trainer::new(schedule, data, eval, total)?;
    Ok(trainer.run_phase(model, policy, phase, total)?.rows)
}

/// Real-valued training that produces the starting point of quantized
/// fine-tuning. Does nothing for `init = scratch`.
pub fn pretrain(
    model: &mut VisionTransformer,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<Vec<TraceRow>> {
    if schedule.init == Init::Scratch || schedule.pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    let real = model.config.policy(&crate::quantization::PolicySpec::real32())?;
    let mut trainer = Trainer::new(schedule, data, eval, schedule.pretrain_epochs)?.with_stream_base(1 << 40);
    Ok(trainer
        .run_phase(model, &real, "pretrain", schedule.pretrain_epochs)?
        .rows)
}

/// Latent-weight state at the phase transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Handoff {
    pub end_of_a: [u8; 32],
    pub start_of_b: [u8; 32],
    /// Train loss at the end of phase A, under the 8-bit policy.
    pub loss_before: f64,
    /// Same weights evaluated under the ternary policy.
    pub loss_after: f64,
}

impl Handoff {
    pub fn bit_exact(&self) -> bool {
        self.end_of_a == self.start_of_b
    }

    pub fn loss_jump(&self) -> f64 {
        self.loss_after - self.loss_before
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveOutcome {
    pub phase_a: Vec<TraceRow>,
    pub phase_b: Vec<TraceRow>,
    /// Present when phase A ran.
    pub handoff: Option<Handoff>,
    pub optimizer: AdamW,
}

impl ProgressiveOutcome {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.phase_a.iter().chain(&self.phase_b).cloned().collect()
    }
}

/// 8-bit proxy training followed by ternary training of the same latent
/// weights. `target` is the ternary policy of phase B; phase A uses it with
/// every ternary layer at 8 bits. Optimizer state and the cosine schedule
/// continue across the transition.
pub fn progressive_train(
    model: &mut VisionTransformer,
    target: &QuantizationPolicy,
    schedule: &TrainSchedule,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<ProgressiveOutcome> {
    let proxy = target.ternary_as_int8();
    let mut trainer = Trainer::new(schedule, data, eval, schedule.total_epochs())?;
    let mut phase_a = Vec::new();
    let mut end_of_a = None;
    if schedule.phase_a_epochs > 0 {
        let rep = trainer.run_phase(model, &proxy, "int8", schedule.phase_a_epochs)?;
        phase_a = rep.rows;
        end_of_a = Some(rep.end_digest);
    }
    let handoff = match end_of_a {
        Some(end) => {
            let loss_before = evaluate(model, &proxy, data, schedule.batch_size)?.0;
            let loss_after = evaluate(model, target, data, schedule.batch_size)?.0;
            Some((end, loss_before, loss_after))
        }
        None => None,
    };
    let rep = trainer.run_phase(model, target, "ternary", schedule.phase_b_epochs)?;
    Ok(ProgressiveOutcome {
        phase_a,
        handoff: handoff.map(|(end, loss_before, loss_after)| Handoff {
            end_of_a: end,
            start_of_b: rep.start_digest,
            loss_before,
            loss_after,
        }),
        phase_b: rep.rows,
        optimizer: trainer.into_optimizer(),
    })
}
