//! Full-batch Adam training with periodic resampling of the collocation
//! points, periodic evaluation on a fixed test set, and patience-based
//! stopping. The best-evaluated network is returned.

mod adam;
mod record;
mod seed;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, AdamParams, AdamState};
pub use record::{StopReason, TrainRecord};
pub use seed::{derive_seed, TRANSFER_SEED_OFFSET};

use crate::bvp::{sample_test_set, sample_training_set, BvpError, BvpSpec, LossNorm, TaggedPointSet};
use crate::net::{Mlp, NetError, PreparedBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite {
        what: &'static str,
        epoch: u64,
        record: Box<TrainRecord>,
    },
    #[error("gradient/optimizer state does not match the network shape")]
    ShapeMismatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("trainability mask has {found} entries, network has {expected} layers")]
    MaskLength { expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("record ends before `{0}`")]
    MissingSection(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 0,
    Test = 1,
    Train = 2,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs between redraws of the training set.
    pub resample_every: u64,
    /// Epochs between test-set evaluations.
    pub eval_every: u64,
    /// Evaluations without strict improvement before stopping.
    pub patience: u32,
    pub adam: AdamParams,
    pub n_interior: usize,
    pub n_per_edge: usize,
    /// Test-set counts are the training counts times this factor.
    pub test_scale: usize,
    pub norm: LossNorm,
    pub max_epochs: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resample_every: 100,
            eval_every: 1000,
            patience: 5,
            adam: AdamParams::default(),
            n_interior: 1_000,
            n_per_edge: 1_000,
            test_scale: 10,
            norm: LossNorm::L2,
            max_epochs: 200_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sampling at the original GPU scale: 10⁴ interior points and 10⁴ per edge.
    pub fn full_scale() -> Self {
        TrainConfig {
            n_interior: 10_000,
            n_per_edge: 10_000,
            ..TrainConfig::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.resample_every == 0 || self.eval_every == 0 {
            return bad("resample_every and eval_every must be positive".into());
        }
        if self.eval_every % self.resample_every != 0 {
            return bad(format!(
                "resample_every ({}) must divide eval_every ({})",
                self.resample_every, self.eval_every
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.n_interior + self.n_per_edge == 0 {
            return bad("training set would be empty".into());
        }
        if self.test_scale == 0 {
            return bad("test_scale must be positive".into());
        }
        self.adam.validate().map_err(TrainError::InvalidConfig)
    }

    /// The fixed test set of a run.
    pub fn test_set(&self, spec: &BvpSpec) -> TaggedPointSet {
        sample_test_set(
            &mut rng_for(self.seed, Stream::Test),
            spec,
            self.n_interior,
            self.n_per_edge,
            self.test_scale,
        )
    }
}

/// Outcome of feeding one evaluation to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

/// Stops once the best loss has not strictly improved for `patience`
/// consecutive evaluations.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: u32,
    best: f64,
    stale: u32,
}

impl EarlyStopping {
    pub fn new(patience: u32) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> Observation {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            Observation {
                improved: true,
                stop: false,
            }
        } else {
            self.stale += 1;
            Observation {
                improved: false,
                stop: self.stale >= self.patience,
            }
        }
    }
}

/// Trains a freshly Glorot-initialised network of the given widths.
pub fn train(spec: &BvpSpec, widths: &[usize], config: &TrainConfig) -> Result<(Mlp, TrainRecord), TrainError> {
    config.validate()?;
    let net = Mlp::glorot_init(widths, &mut rng_for(config.seed, Stream::Init))?;
    let trainable = vec![true; net.layers().len()];
    train_from(net, &trainable, spec, config)
}

/// Trains `net` in place of a fresh initialisation; layers whose `trainable`
/// entry is false are never modified.
pub fn train_from(
    net: Mlp,
    trainable: &[bool],
    spec: &BvpSpec,
    config: &TrainConfig,
) -> Result<(Mlp, TrainRecord), TrainError> {
    config.validate()?;
    spec.validate()?;
    if trainable.len() != net.layers().len() {
        return Err(TrainError::MaskLength {
            expected: net.layers().len(),
            found: trainable.len(),
        });
    }
    let started = Instant::now();
    // Leading frozen layers are propagated once per point set.
    let prefix = trainable.iter().take_while(|&&t| !t).count().min(net.layers().len() - 1);

    let mut net = net;
    let test = PreparedBatch::new(&net, &config.test_set(spec), spec, prefix)?;
    let mut train_rng = rng_for(config.seed, Stream::Train);
    let mut state = AdamState::new(&net);
    let mut stopping = EarlyStopping::new(config.patience);
    let mut record = TrainRecord::new(config, spec, &net.widths(), trainable);
    let mut best: Option<Mlp> = None;
    let mut batch: Option<PreparedBatch> = None;

    let mut epoch = 0u64;
    while epoch < config.max_epochs {
        if epoch % config.resample_every == 0 {
            let set = sample_training_set(&mut train_rng, spec, config.n_interior, config.n_per_edge);
            batch = Some(PreparedBatch::new(&net, &set, spec, prefix)?);
        }
        let prepared = batch.as_ref().expect("batch drawn at epoch 0");
        let (loss, grad) = prepared.loss_and_gradient(&net, spec.eta, config.norm);
        if !loss.is_finite() || !grad.is_finite() {
            record.epochs_trained = epoch;
            record.wall_time_s = started.elapsed().as_secs_f64();
            return Err(TrainError::NonFinite {
                what: "training loss",
                epoch,
                record: Box::new(record),
            });
        }
        adam_step(&mut net, &grad, &mut state, &config.adam, trainable)?;
        epoch += 1;

        if epoch % config.eval_every == 0 {
            let test_loss = test.loss(&net, spec.eta, config.norm);
            if !test_loss.is_finite() {
                record.epochs_trained = epoch;
                record.wall_time_s = started.elapsed().as_secs_f64();
                return Err(TrainError::NonFinite {
                    what: "test loss",
                    epoch,
                    record: Box::new(record),
                });
            }
            record.history.push((epoch, test_loss));
            let obs = stopping.observe(test_loss);
            if obs.improved {
                best = Some(net.clone());
                record.best_epoch = epoch;
                record.final_test_loss = test_loss;
            }
            if obs.stop {
                record.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    record.epochs_trained = epoch;
    if best.is_none() {
        // No evaluation happened (max_epochs < eval_every): evaluate once.
        let test_loss = test.loss(&net, spec.eta, config.norm);
        record.history.push((epoch, test_loss));
        record.best_epoch = epoch;
        record.final_test_loss = test_loss;
        best = Some(net.clone());
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((best.expect("set above"), record))
}
