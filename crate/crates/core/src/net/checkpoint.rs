//! Plain-text network checkpoints.
//!
//! ```text
//! DENN-CHECKPOINT
//! version=1
//! widths=2,20,20,20,20,1
//! activation=tanh
//! seed=1234
//! meta.x_prime=0.2            (any number of meta.* lines)
//! W1 20 2                     (rows cols, then `rows` lines of `cols` values)
//! …
//! b1 20                       (length, then one line of values)
//! …
//! end
//! ```
//!
//! Values are written in shortest round-trip exponent form, so a write/read
//! cycle reproduces every parameter bit for bit. Blank lines and `#` comments
//! are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::{Activation, Dense, Mlp, NetError};
use crate::text::{join_f64, parse_f64_list, split_key_value, write_atomic, LineCursor};

pub const MAGIC: &str = "DENN-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("file ends before section `{0}`")]
    MissingSection(String),
    #[error("section `{section}`: expected {expected}, found {found}")]
    Shape {
        section: String,
        expected: String,
        found: String,
    },
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    Version { found: String },
    #[error("invalid network: {0}")]
    Net(#[from] NetError),
}

/// A network plus the header fields stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Mlp,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(net: Mlp, seed: u64) -> Self {
        Checkpoint {
            net,
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let widths = self.net.widths();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "version={FORMAT_VERSION}").unwrap();
        writeln!(
            out,
            "widths={}",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(out, "activation={}", self.net.activation()).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        for (k, v) in &self.metadata {
            writeln!(out, "meta.{k}={v}").unwrap();
        }
        for (i, layer) in self.net.layers().iter().enumerate() {
            let l = i + 1;
            writeln!(out, "W{l} {} {}", layer.fan_out(), layer.fan_in()).unwrap();
            for row in layer.weights.rows() {
                writeln!(out, "{}", join_f64(row.iter().copied())).unwrap();
            }
            writeln!(out, "b{l} {}", layer.bias.len()).unwrap();
            writeln!(out, "{}", join_f64(layer.bias.iter().copied())).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut cur = LineCursor::new(text);
        match cur.next_line() {
            Some((_, MAGIC)) => {}
            Some((line, other)) => {
                return Err(CheckpointError::Malformed {
                    line,
                    message: format!("expected `{MAGIC}`, found `{other}`"),
                })
            }
            None => return Err(CheckpointError::MissingSection(MAGIC.to_string())),
        }

        let mut version = None;
        let mut widths: Option<Vec<usize>> = None;
        let mut activation = None;
        let mut seed = None;
        let mut metadata = BTreeMap::new();
        while let Some((line, content)) = cur.peek() {
            let Some((key, value)) = split_key_value(content) else { break };
            cur.next_line();
            let bad = |what: &str| CheckpointError::Malformed {
                line,
                message: format!("invalid {what} `{value}`"),
            };
            match key {
                "version" => {
                    if value.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(CheckpointError::Version {
                            found: value.to_string(),
                        });
                    }
                    version = Some(FORMAT_VERSION);
                }
                "widths" => {
                    let parsed: Result<Vec<usize>, _> = value.split(',').map(|w| w.trim().parse()).collect();
                    widths = Some(parsed.map_err(|_| bad("widths"))?);
                }
                "activation" => activation = Some(value.parse::<Activation>()?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("seed"))?),
                k if k.starts_with("meta.") => {
                    metadata.insert(k["meta.".len()..].to_string(), value.to_string());
                }
                _ => {
                    return Err(CheckpointError::Malformed {
                        line,
                        message: format!("unknown header key `{key}`"),
                    })
                }
            }
        }
        if version.is_none() {
            return Err(CheckpointError::MissingSection("version".into()));
        }
        let widths = widths.ok_or_else(|| CheckpointError::MissingSection("widths".into()))?;
        let activation = activation.ok_or_else(|| CheckpointError::MissingSection("activation".into()))?;
        let seed = seed.ok_or_else(|| CheckpointError::MissingSection("seed".into()))?;
        super::validate_widths(&widths)?;

        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let name = format!("W{}", i + 1);
            let (rows, cols) = read_block_header(&mut cur, &name, 2)
                .map(|d| (d[0], d[1]))?;
            if (rows, cols) != (fan_out, fan_in) {
                return Err(CheckpointError::Shape {
                    section: name,
                    expected: format!("{fan_out}x{fan_in}"),
                    found: format!("{rows}x{cols}"),
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                data.extend(read_values(&mut cur, &name, cols)?);
            }
            let weights = Array2::from_shape_vec((rows, cols), data).expect("shape checked");

            let bname = format!("b{}", i + 1);
            let len = read_block_header(&mut cur, &bname, 1)?[0];
            if len != fan_out {
                return Err(CheckpointError::Shape {
                    section: bname,
                    expected: fan_out.to_string(),
                    found: len.to_string(),
                });
            }
            let bias = Array1::from(read_values(&mut cur, &bname, len)?);
            layers.push(Dense { weights, bias });
        }
        match cur.next_line() {
            Some((_, "end")) => {}
            Some((line, other)) => {
                return Err(CheckpointError::Malformed {
                    line,
                    message: format!("expected `end`, found `{other}`"),
                })
            }
            None => return Err(CheckpointError::MissingSection("end".into())),
        }
        if let Some((line, other)) = cur.next_line() {
            return Err(CheckpointError::Malformed {
                line,
                message: format!("trailing content `{other}`"),
            });
        }
        let net = Mlp::from_layers(layers, activation)?;
        Ok(Checkpoint { net, seed, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn read_block_header(cur: &mut LineCursor<'_>, name: &str, dims: usize) -> Result<Vec<usize>, CheckpointError> {
    let (line, content) = cur
        .next_line()
        .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))?;
    let mut parts = content.split_whitespace();
    if parts.next() != Some(name) {
        return Err(CheckpointError::Malformed {
            line,
            message: format!("expected section `{name}`, found `{content}`"),
        });
    }
    let values: Result<Vec<usize>, _> = parts.map(str::parse).collect();
    match values {
        Ok(v) if v.len() == dims => Ok(v),
        _ => Err(CheckpointError::Malformed {
            line,
            message: format!("section `{name}` needs {dims} dimension(s)"),
        }),
    }
}

fn read_values(cur: &mut LineCursor<'_>, name: &str, count: usize) -> Result<Vec<f64>, CheckpointError> {
    let (line, content) = cur
        .next_line()
        .ok_or_else(|| CheckpointError::MissingSection(format!("{name} data")))?;
    let values = parse_f64_list(content).map_err(|message| CheckpointError::Malformed { line, message })?;
    if values.len() != count {
        return Err(CheckpointError::Shape {
            section: name.to_string(),
            expected: format!("{count} values per line"),
            found: format!("{} on line {line}", values.len()),
        });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(CheckpointError::Malformed {
            line,
            message: format!("non-finite value {v}"),
        });
    }
    Ok(values)
}

/// Writes `net` with its seed and no metadata.
pub fn checkpoint_write(net: &Mlp, seed: u64, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::new(net.clone(), seed).write(path)
}

pub fn checkpoint_read(path: &Path) -> Result<Mlp, CheckpointError> {
    Ok(Checkpoint::read(path)?.net)
}
