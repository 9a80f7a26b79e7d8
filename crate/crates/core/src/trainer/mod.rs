//! End-to-end DP finetuning of a linear head.
//!
//! Each step draws a batch, sums per-example clipped gradients, adds Gaussian
//! noise of standard deviation `σC`, averages, and hands the privatized
//! gradient to the optimizer. With privacy on, `σ` is calibrated before the
//! first step from the planned step count and the selector's sampling rate.

mod sweep;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use sweep::{run_sweep, CellSummary, SweepAxis, SweepGrid, SweepResults, SweepRow};

use crate::accountant::{default_orders, privacy_report, PrivacyReport, PrivacySpec};
use crate::config::{InitKind, PrivacyMode, TrainConfig};
use crate::data::{BatchMode, BatchSelector, FeatureDataset};
use crate::error::{Error, Result};
use crate::grad::{clipped_gradient_sum_with_stats, noisy_gradient_with_denominator, Batch, LinearHead};
use crate::noise::{derive_seed, GaussianNoise};
use crate::optim::{dp_step, OptimizerState, Schedule};

const INIT_STREAM: u64 = 10;
const BATCH_STREAM: u64 = 11;
const NOISE_STREAM: u64 = 12;

/// Head weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Gaussian { stddev: f64 },
}

/// `W = 0` or `W ~ N(0, stddev²)` i.i.d.; `b = bias_init` in every class.
pub fn init_head(dim: usize, classes: usize, init: Init, bias_init: f64, seed: u64) -> LinearHead {
    let mut head = LinearHead::zeros(classes, dim);
    if let Init::Gaussian { stddev } = init {
        if stddev > 0.0 {
            let mut rng = GaussianNoise::from_seed(seed);
            for w in head.weights_mut() {
                *w = rng.sample(stddev);
            }
        }
    }
    head.bias_mut().fill(bias_init);
    head
}

/// Index of the largest logit; ties go to the smallest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = j;
        }
    }
    best
}

/// Top-1 accuracy of `head` on `dataset`.
pub fn evaluate(head: &LinearHead, dataset: &FeatureDataset) -> Result<f64> {
    if head.dim() != dataset.dim() {
        return Err(Error::Shape {
            what: "feature dimension",
            expected: head.dim(),
            actual: dataset.dim(),
        });
    }
    let mut z = vec![0.0; head.classes()];
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        head.logits_into(dataset.row(i), &mut z);
        if argmax(&z) == usize::from(dataset.labels()[i]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy of a uniformly random guess.
pub fn random_chance(classes: usize) -> f64 {
    1.0 / classes as f64
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Number of optimizer updates applied, starting at 1.
    pub step: u64,
    pub learning_rate: f64,
    /// Mean loss of the batch before the update; absent for an empty batch.
    pub train_loss: Option<f64>,
    /// Norm of the clipped gradient sum before noise.
    pub grad_norm: f64,
    pub clipped_fraction: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl MetricsRow {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics row serializes")
    }
}

/// What training produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: LinearHead,
    pub metrics: Vec<MetricsRow>,
    /// Present whenever noise with `σ > 0` was added.
    pub report: Option<PrivacyReport>,
    pub sigma: f64,
    pub steps: u64,
    pub sampling_rate: f64,
    pub final_accuracy: f64,
}

/// Step count, schedule and noise level derived from a config and a dataset.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub batch_mode: BatchMode,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub sampling_rate: f64,
    pub schedule: Schedule,
    pub sigma: f64,
    pub privacy: Option<PrivacySpec>,
}

impl TrainPlan {
    pub fn new(config: &TrainConfig, n: usize) -> Result<Self> {
        config.validate()?;
        let batch_mode = config.batch_mode();
        if let BatchMode::Shuffle { batch_size } = batch_mode {
            if batch_size == 0 || batch_size > n {
                return Err(Error::Config(format!("batch.size {batch_size} must be in 1..={n}")));
            }
        }
        if let BatchMode::Poisson { rate } = batch_mode {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::Config(format!("batch.sampling_rate {rate} outside (0, 1]")));
            }
        }
        let steps_per_epoch = batch_mode.steps_per_epoch(n);
        let total_steps = if config.single_step {
            1
        } else {
            config.steps.unwrap_or(config.epochs * steps_per_epoch)
        };
        let sampling_rate = batch_mode.sampling_rate(n);
        let warmup =
            config.schedule.warmup_steps + (config.schedule.warmup_epochs * steps_per_epoch as f64).round() as u64;
        let schedule = Schedule {
            kind: config.schedule.kind,
            warmup_steps: warmup.min(total_steps),
            total_steps,
            base_rate: config.schedule.base_rate,
        };
        let (sigma, privacy) = match config.privacy.mode {
            PrivacyMode::Off => (0.0, None),
            mode => {
                if matches!(batch_mode, BatchMode::Shuffle { .. }) {
                    log::warn!("shuffled batches are accounted as Poisson sampling with q = {sampling_rate}");
                }
                let clip = config.clip_norm.expect("validated");
                let spec = PrivacySpec::new(
                    if mode == PrivacyMode::Target {
                        config.privacy.epsilon
                    } else {
                        f64::INFINITY
                    },
                    config.privacy.delta,
                    clip,
                    sampling_rate,
                    total_steps,
                )?;
                spec.check_delta_for(n);
                let spec = if mode == PrivacyMode::Target {
                    spec.calibrated(&default_orders())?
                } else {
                    spec.with_noise_multiplier(config.privacy.noise_multiplier)
                };
                (spec.noise_multiplier.expect("resolved"), Some(spec))
            }
        };
        Ok(Self {
            batch_mode,
            steps_per_epoch,
            total_steps,
            sampling_rate,
            schedule,
            sigma,
            privacy,
        })
    }

    /// Privacy report of the plan; `None` without noise.
    pub fn report(&self) -> Result<Option<PrivacyReport>> {
        match &self.privacy {
            Some(spec) if self.sigma > 0.0 => privacy_report(spec).map(Some),
            Some(_) => {
                log::warn!("noise multiplier is zero: no differential privacy guarantee");
                Ok(None)
            }
            None => Ok(None),
        }
    }
}

type Observer<'a> = Box<dyn FnMut(u64, &LinearHead) + 'a>;

/// Training driver with optional evaluation set, timing and per-step observer.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    eval: Option<&'a FeatureDataset>,
    record_time: bool,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig) -> Self {
        Self {
            config,
            eval: None,
            record_time: false,
            observer: None,
        }
    }

    /// Evaluate on `dataset` instead of the training data.
    pub fn eval_on(mut self, dataset: &'a FeatureDataset) -> Self {
        self.eval = Some(dataset);
        self
    }

    /// Record wall-clock seconds in each metrics row. Makes metrics
    /// nondeterministic.
    pub fn record_wall_time(mut self, yes: bool) -> Self {
        self.record_time = yes;
        self
    }

    /// Called after every update with the step number and the new head.
    pub fn observe(mut self, f: impl FnMut(u64, &LinearHead) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn run(mut self, dataset: &FeatureDataset) -> Result<TrainOutcome> {
        let config = self.config;
        let plan = TrainPlan::new(config, dataset.len())?;
        let report = plan.report()?;
        let eval_set = self.eval.unwrap_or(dataset);
        if eval_set.dim() != dataset.dim() {
            return Err(Error::Shape {
                what: "evaluation feature dimension",
                expected: dataset.dim(),
                actual: eval_set.dim(),
            });
        }
        let init = match config.init.kind {
            InitKind::Zero => Init::Zero,
            InitKind::Gaussian => Init::Gaussian {
                stddev: config.init.stddev,
            },
        };
        let mut head = init_head(
            dataset.dim(),
            dataset.classes(),
            init,
            config.init.bias,
            derive_seed(config.seed, INIT_STREAM),
        );
        let mut state = OptimizerState::new(config.optimizer, &head);
        let mut selector = BatchSelector::new(plan.batch_mode, dataset.len(), derive_seed(config.seed, BATCH_STREAM))?;
        let mut noise = GaussianNoise::from_seed(derive_seed(config.seed, NOISE_STREAM));
        let clip = config.clip_norm;
        let noise_clip = clip.unwrap_or(0.0);
        let started = Instant::now();
        let mut metrics = Vec::with_capacity(plan.total_steps as usize);
        let mut final_accuracy = f64::NAN;

        for t in 0..plan.total_steps {
            let (packet, stats) = match plan.batch_mode {
                BatchMode::Full => clipped_gradient_sum_with_stats(&head, &dataset.as_batch(), clip)?,
                _ => {
                    let idx = selector.next_batch();
                    let (features, labels) = dataset.gather(&idx);
                    let batch = Batch::new(&features, &labels, dataset.dim())?;
                    clipped_gradient_sum_with_stats(&head, &batch, clip)?
                }
            };
            let count = packet.count();
            let denominator = match plan.batch_mode {
                BatchMode::Poisson { rate } => (rate * dataset.len() as f64).max(1.0),
                _ => count as f64,
            };
            let gradient = noisy_gradient_with_denominator(&packet, plan.sigma, noise_clip, denominator, &mut noise)?;
            let rate = plan.schedule.rate(t);
            let (next_head, next_state) = dp_step(&head, &state, &gradient, rate)?;
            head = next_head;
            state = next_state;

            let step = t + 1;
            let train_loss = (count > 0).then(|| stats.loss_sum / count as f64);
            let mut row = MetricsRow {
                step,
                learning_rate: rate,
                train_loss,
                grad_norm: packet.norm(),
                clipped_fraction: if count > 0 {
                    stats.clipped as f64 / count as f64
                } else {
                    0.0
                },
                batch_size: count,
                eval_accuracy: None,
                wall_time_s: None,
            };
            let finite = train_loss.is_none_or(f64::is_finite) && head.is_finite();
            if !finite {
                if self.record_time {
                    row.wall_time_s = Some(started.elapsed().as_secs_f64());
                }
                return Err(Error::NonFinite {
                    message: "loss or parameters became non-finite".into(),
                    row: Box::new(row),
                    completed: metrics,
                });
            }
            if step % plan.steps_per_epoch == 0 || step == plan.total_steps {
                let acc = evaluate(&head, eval_set)?;
                row.eval_accuracy = Some(acc);
                final_accuracy = acc;
            }
            if self.record_time {
                row.wall_time_s = Some(started.elapsed().as_secs_f64());
            }
            if let Some(f) = self.observer.as_mut() {
                f(step, &head);
            }
            metrics.push(row);
        }

        Ok(TrainOutcome {
            head,
            metrics,
            report,
            sigma: plan.sigma,
            steps: plan.total_steps,
            sampling_rate: plan.sampling_rate,
            final_accuracy,
        })
    }
}

/// Trains with evaluation on the training data.
pub fn train(config: &TrainConfig, dataset: &FeatureDataset) -> Result<TrainOutcome> {
    Trainer::new(config).run(dataset)
}

/// Writes the one-row run summary CSV.
pub fn write_run_summary<W: std::io::Write>(out: W, outcome: &TrainOutcome, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Validation(format!("writing summary: {e}"));
    w.write_record(["run_id", "final_accuracy", "epsilon_achieved", "sigma", "steps", "seed"])
        .map_err(err)?;
    w.write_record([
        "0".to_string(),
        outcome.final_accuracy.to_string(),
        outcome.report.as_ref().map_or(String::new(), |r| r.epsilon.to_string()),
        outcome.sigma.to_string(),
        outcome.steps.to_string(),
        seed.to_string(),
    ])
    .map_err(err)?;
    w.flush()
        .map_err(|e| Error::Validation(format!("writing summary: {e}")))
}
