use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use super::{AdamParams, TrainConfig, TrainError};
use crate::bvp::{BvpSpec, LossNorm, Rect};
use crate::text::{fmt_f64, split_key_value, write_atomic, LineCursor};

const MAGIC: &str = "DENN-TRAIN-RECORD";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

impl FromStr for StopReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "patience" => Ok(StopReason::Patience),
            "max_epochs" => Ok(StopReason::MaxEpochs),
            _ => Err(format!("unknown stop reason `{s}`")),
        }
    }
}

/// Everything needed to audit or reproduce one training run.
///
/// `wall_time_s` is informational and not part of the text form, which keeps
/// record files byte-identical across reruns.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub spec: BvpSpec,
    pub widths: Vec<usize>,
    pub trainable: Vec<bool>,
    /// `(epoch, test loss)` at every evaluation.
    pub history: Vec<(u64, f64)>,
    pub epochs_trained: u64,
    /// Epoch of the best evaluation; the returned network is from here.
    pub best_epoch: u64,
    pub final_test_loss: f64,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
}

impl TrainRecord {
    pub fn new(config: &TrainConfig, spec: &BvpSpec, widths: &[usize], trainable: &[bool]) -> Self {
        TrainRecord {
            config: config.clone(),
            spec: *spec,
            widths: widths.to_vec(),
            trainable: trainable.to_vec(),
            history: Vec::new(),
            epochs_trained: 0,
            best_epoch: 0,
            final_test_loss: f64::NAN,
            stop_reason: StopReason::MaxEpochs,
            wall_time_s: 0.0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn without_timing(&self) -> Self {
        TrainRecord {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let s = &self.spec;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("version", FORMAT_VERSION.to_string());
        kv("seed", c.seed.to_string());
        kv(
            "widths",
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv(
            "trainable",
            self.trainable.iter().map(|&t| if t { "1" } else { "0" }).collect::<Vec<_>>().join(","),
        );
        kv("task.x_source", fmt_f64(s.x_source));
        kv("task.y_source", fmt_f64(s.y_source));
        kv("task.r", fmt_f64(s.r));
        kv("task.eta", fmt_f64(s.eta));
        kv(
            "task.domain",
            [s.domain.x0, s.domain.x1, s.domain.y0, s.domain.y1]
                .map(fmt_f64)
                .join(","),
        );
        kv("config.resample_every", c.resample_every.to_string());
        kv("config.eval_every", c.eval_every.to_string());
        kv("config.patience", c.patience.to_string());
        kv("config.max_epochs", c.max_epochs.to_string());
        kv("config.n_interior", c.n_interior.to_string());
        kv("config.n_per_edge", c.n_per_edge.to_string());
        kv("config.test_scale", c.test_scale.to_string());
        kv("config.norm", c.norm.to_string());
        kv("config.adam.step_size", fmt_f64(c.adam.step_size));
        kv("config.adam.beta1", fmt_f64(c.adam.beta1));
        kv("config.adam.beta2", fmt_f64(c.adam.beta2));
        kv("config.adam.epsilon", fmt_f64(c.adam.epsilon));
        kv("epochs_trained", self.epochs_trained.to_string());
        kv("best_epoch", self.best_epoch.to_string());
        kv("final_test_loss", fmt_f64(self.final_test_loss));
        kv("stop_reason", self.stop_reason.to_string());
        let mut text = format!("{MAGIC}\n{out}history {}\n", self.history.len());
        for &(epoch, loss) in &self.history {
            writeln!(text, "{epoch} {}", fmt_f64(loss)).unwrap();
        }
        text.push_str("end\n");
        text
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cur = LineCursor::new(text);
        match cur.next_line() {
            Some((_, MAGIC)) => {}
            Some((line, other)) => {
                return Err(TrainError::Malformed {
                    line,
                    message: format!("expected `{MAGIC}`, found `{other}`"),
                })
            }
            None => return Err(TrainError::MissingSection(MAGIC.into())),
        }
        let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        while let Some((line, content)) = cur.peek() {
            let Some((key, value)) = split_key_value(content) else { break };
            cur.next_line();
            if fields.insert(key, (line, value)).is_some() {
                return Err(TrainError::Malformed {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }

        fn get<T: FromStr>(fields: &BTreeMap<&str, (usize, &str)>, key: &str) -> Result<T, TrainError> {
            let &(line, value) = fields.get(key).ok_or_else(|| TrainError::MissingSection(key.into()))?;
            value.parse().map_err(|_| TrainError::Malformed {
                line,
                message: format!("invalid {key} `{value}`"),
            })
        }
        fn list<T: FromStr>(fields: &BTreeMap<&str, (usize, &str)>, key: &str) -> Result<Vec<T>, TrainError> {
            let &(line, value) = fields.get(key).ok_or_else(|| TrainError::MissingSection(key.into()))?;
            value
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| TrainError::Malformed {
                    line,
                    message: format!("invalid {key} `{value}`"),
                })
        }

        let version: u32 = get(&fields, "version")?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Malformed {
                line: fields["version"].0,
                message: format!("unsupported record version {version}"),
            });
        }
        let trainable: Vec<u8> = list(&fields, "trainable")?;
        if trainable.iter().any(|&t| t > 1) {
            return Err(TrainError::Malformed {
                line: fields["trainable"].0,
                message: "trainable flags must be 0 or 1".into(),
            });
        }
        let d: Vec<f64> = list(&fields, "task.domain")?;
        if d.len() != 4 {
            return Err(TrainError::Malformed {
                line: fields["task.domain"].0,
                message: "domain needs four bounds".into(),
            });
        }
        let domain = Rect::new(d[0], d[1], d[2], d[3]).map_err(|e| TrainError::Malformed {
            line: fields["task.domain"].0,
            message: e.to_string(),
        })?;
        let spec = BvpSpec {
            x_source: get(&fields, "task.x_source")?,
            y_source: get(&fields, "task.y_source")?,
            r: get(&fields, "task.r")?,
            eta: get(&fields, "task.eta")?,
            domain,
        };
        let norm: LossNorm = get(&fields, "config.norm")?;
        let config = TrainConfig {
            resample_every: get(&fields, "config.resample_every")?,
            eval_every: get(&fields, "config.eval_every")?,
            patience: get(&fields, "config.patience")?,
            adam: AdamParams {
                step_size: get(&fields, "config.adam.step_size")?,
                beta1: get(&fields, "config.adam.beta1")?,
                beta2: get(&fields, "config.adam.beta2")?,
                epsilon: get(&fields, "config.adam.epsilon")?,
            },
            n_interior: get(&fields, "config.n_interior")?,
            n_per_edge: get(&fields, "config.n_per_edge")?,
            test_scale: get(&fields, "config.test_scale")?,
            norm,
            max_epochs: get(&fields, "config.max_epochs")?,
            seed: get(&fields, "seed")?,
        };

        let (line, header) = cur.next_line().ok_or_else(|| TrainError::MissingSection("history".into()))?;
        let count: usize = header
            .strip_prefix("history ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| TrainError::Malformed {
                line,
                message: format!("expected `history <count>`, found `{header}`"),
            })?;
        let mut history = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (line, row) = cur
                .next_line()
                .ok_or_else(|| TrainError::MissingSection("history row".into()))?;
            let entry = row.split_once(' ').and_then(|(e, l)| Some((e.parse().ok()?, l.trim().parse().ok()?)));
            history.push(entry.ok_or_else(|| TrainError::Malformed {
                line,
                message: format!("invalid history row `{row}`"),
            })?);
        }
        match cur.next_line() {
            Some((_, "end")) => {}
            Some((line, other)) => {
                return Err(TrainError::Malformed {
                    line,
                    message: format!("expected `end`, found `{other}`"),
                })
            }
            None => return Err(TrainError::MissingSection("end".into())),
        }
        if let Some((line, _)) = cur.next_line() {
            return Err(TrainError::Malformed {
                line,
                message: "trailing content after `end`".into(),
            });
        }

        Ok(TrainRecord {
            config,
            spec,
            widths: list(&fields, "widths")?,
            trainable: trainable.into_iter().map(|t| t == 1).collect(),
            history,
            epochs_trained: get(&fields, "epochs_trained")?,
            best_epoch: get(&fields, "best_epoch")?,
            final_test_loss: get(&fields, "final_test_loss")?,
            stop_reason: get(&fields, "stop_reason")?,
            wall_time_s: 0.0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
