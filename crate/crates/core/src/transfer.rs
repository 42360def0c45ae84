//! Donor/recipient transfer experiments: splicing leading hidden layers into a
//! fresh network, training it with those layers frozen or free, and the
//! frozen-transfer over frozen-selffer loss ratio.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::bvp::{BvpError, BvpSpec};
use crate::generality::XTenths;
use crate::net::{Mlp, NetError};
use crate::trainer::{derive_seed, rng_for, train_from, Stream, TrainConfig, TrainError, TrainRecord, TRANSFER_SEED_OFFSET};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("cannot transfer {n} layers of a network with {depth} hidden layers")]
    DepthRange { n: usize, depth: usize },
    #[error("no outcomes for group {0}")]
    MissingGroup(String),
    #[error("missing donor networks for seeds {0:?}")]
    MissingDonors(Vec<u64>),
    #[error("donor and recipient architectures differ")]
    Architecture,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferMode {
    Frozen,
    Retrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    SelfferFrozen,
    SelfferRetrained,
    TransferFrozen,
    TransferRetrained,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::SelfferFrozen,
        Group::SelfferRetrained,
        Group::TransferFrozen,
        Group::TransferRetrained,
    ];

    pub fn new(selffer: bool, mode: TransferMode) -> Self {
        match (selffer, mode) {
            (true, TransferMode::Frozen) => Group::SelfferFrozen,
            (true, TransferMode::Retrained) => Group::SelfferRetrained,
            (false, TransferMode::Frozen) => Group::TransferFrozen,
            (false, TransferMode::Retrained) => Group::TransferRetrained,
        }
    }

    pub fn mode(self) -> TransferMode {
        match self {
            Group::SelfferFrozen | Group::TransferFrozen => TransferMode::Frozen,
            _ => TransferMode::Retrained,
        }
    }

    pub fn is_selffer(self) -> bool {
        matches!(self, Group::SelfferFrozen | Group::SelfferRetrained)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::SelfferFrozen => "selffer-frozen",
            Group::SelfferRetrained => "selffer-retrained",
            Group::TransferFrozen => "transfer-frozen",
            Group::TransferRetrained => "transfer-retrained",
        })
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Group::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| format!("unknown group `{s}`"))
    }
}

/// Copies hidden layers `1..=n` of `donor` into a network whose remaining
/// layers are Glorot-initialised from `rng`. The returned mask is false for
/// the copied layers.
pub fn splice_recipient<R: Rng + ?Sized>(donor: &Mlp, n: usize, rng: &mut R) -> Result<(Mlp, Vec<bool>), TransferError> {
    let depth = donor.depth();
    if n == 0 || n > depth {
        return Err(TransferError::DepthRange { n, depth });
    }
    let mut recipient = Mlp::glorot_init(&donor.widths(), rng)?;
    for index in 0..n {
        recipient.set_layer(index, donor.layers()[index].clone())?;
    }
    let mask = (0..donor.layers().len()).map(|i| i >= n).collect();
    Ok((recipient, mask))
}

/// One recipient training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferJob {
    pub group: Group,
    pub n: usize,
    pub x_a: XTenths,
    pub x_b: XTenths,
    pub donor_seed: u64,
    /// Recipient ordinal; the actual seed is derived from it.
    pub recipient: u64,
}

impl TransferJob {
    /// Task the recipient is trained on.
    pub fn task(&self) -> XTenths {
        if self.group.is_selffer() {
            self.x_a
        } else {
            self.x_b
        }
    }

    /// Shared by all four groups of one pairing, so they start from the same
    /// fresh layers.
    pub fn recipient_seed(&self, width: usize, depth: usize) -> u64 {
        derive_seed(
            self.x_a.0,
            0,
            depth as u64,
            width as u64,
            TRANSFER_SEED_OFFSET + self.donor_seed * 1000 + self.recipient,
        )
    }

    /// Directory-friendly identifier.
    pub fn label(&self) -> String {
        format!("{}/n{}/d{}/r{}", self.group, self.n, self.donor_seed, self.recipient)
    }
}

/// Every job of the protocol, in a fixed order: n, then pairing, then group.
pub fn protocol_jobs(x_a: XTenths, x_b: XTenths, ns: &[usize], donor_seeds: &[u64], recipients: u64) -> Vec<TransferJob> {
    let mut jobs = Vec::new();
    for &n in ns {
        for &donor_seed in donor_seeds {
            for recipient in 0..recipients {
                for group in Group::ALL {
                    jobs.push(TransferJob {
                        group,
                        n,
                        x_a,
                        x_b,
                        donor_seed,
                        recipient,
                    });
                }
            }
        }
    }
    jobs
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub job: TransferJob,
    pub width: usize,
    pub recipient_seed: u64,
    pub final_loss: f64,
    pub epochs: u64,
}

/// Splices and trains one recipient. `base` supplies r, η and the domain.
pub fn run_job(
    job: &TransferJob,
    donor: &Mlp,
    base: &BvpSpec,
    config: &TrainConfig,
) -> Result<(Mlp, TrainRecord, TransferOutcome), TransferError> {
    let width = donor.hidden_widths()[0];
    let seed = job.recipient_seed(width, donor.depth());
    let (recipient, mask) = splice_recipient(donor, job.n, &mut rng_for(seed, Stream::Init))?;
    let mask = match job.group.mode() {
        TransferMode::Frozen => mask,
        TransferMode::Retrained => vec![true; mask.len()],
    };
    let spec = BvpSpec {
        x_source: job.task().value(),
        ..*base
    };
    spec.validate()?;
    let (net, record) = train_from(recipient, &mask, &spec, &config.with_seed(seed))?;
    let outcome = TransferOutcome {
        job: *job,
        width,
        recipient_seed: seed,
        final_loss: record.final_test_loss,
        epochs: record.epochs_trained,
    };
    Ok((net, record, outcome))
}

/// Runs every job sequentially. `donors` pairs each donor seed with its
/// network.
pub fn run_protocol(
    donors: &[(u64, Mlp)],
    jobs: &[TransferJob],
    base: &BvpSpec,
    config: &TrainConfig,
) -> Result<Vec<TransferOutcome>, TransferError> {
    let missing: Vec<u64> = {
        let mut m: Vec<u64> = jobs
            .iter()
            .map(|j| j.donor_seed)
            .filter(|s| !donors.iter().any(|(d, _)| d == s))
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    if !missing.is_empty() {
        return Err(TransferError::MissingDonors(missing));
    }
    if let Some((_, first)) = donors.first() {
        if donors.iter().any(|(_, d)| d.widths() != first.widths()) {
            return Err(TransferError::Architecture);
        }
    }
    jobs.iter()
        .map(|job| {
            let donor = &donors.iter().find(|(d, _)| *d == job.donor_seed).expect("checked above").1;
            Ok(run_job(job, donor, base, config)?.2)
        })
        .collect()
}

/// Mean frozen-transfer loss over mean frozen-selffer loss at depth `n`, with
/// the extreme ratios over all individual pairings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferRatio {
    pub n: usize,
    pub ratio: f64,
    pub min: f64,
    pub max: f64,
}

pub fn transfer_specificity(outcomes: &[TransferOutcome], n: usize) -> Result<TransferRatio, TransferError> {
    let losses = |g: Group| -> Result<Vec<f64>, TransferError> {
        let v: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.job.n == n && o.job.group == g)
            .map(|o| o.final_loss)
            .collect();
        if v.is_empty() {
            Err(TransferError::MissingGroup(format!("{g} at n={n}")))
        } else {
            Ok(v)
        }
    };
    let transfer = losses(Group::TransferFrozen)?;
    let selffer = losses(Group::SelfferFrozen)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for t in &transfer {
        for s in &selffer {
            let r = t / s;
            min = min.min(r);
            max = max.max(r);
        }
    }
    Ok(TransferRatio {
        n,
        ratio: mean(&transfer) / mean(&selffer),
        min,
        max,
    })
}

pub const OUTCOME_HEADER: [&str; 10] = [
    "group",
    "n",
    "width",
    "x_a",
    "x_b",
    "donor_seed",
    "recipient",
    "recipient_seed",
    "epochs",
    "final_loss",
];

pub fn outcomes_csv(outcomes: &[TransferOutcome]) -> Result<String, TransferError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(OUTCOME_HEADER)?;
    for o in outcomes {
        w.write_record([
            o.job.group.to_string(),
            o.job.n.to_string(),
            o.width.to_string(),
            o.job.x_a.to_string(),
            o.job.x_b.to_string(),
            o.job.donor_seed.to_string(),
            o.job.recipient.to_string(),
            o.recipient_seed.to_string(),
            o.epochs.to_string(),
            format!("{:.10e}", o.final_loss),
        ])?;
    }
    Ok(crate::text::csv_string(w)?)
}

/// Per-(group, n) summary: mean, min and max final loss.
pub fn group_summary_csv(outcomes: &[TransferOutcome]) -> Result<String, TransferError> {
    let mut keys: Vec<(usize, Group)> = outcomes.iter().map(|o| (o.job.n, o.job.group)).collect();
    keys.sort();
    keys.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "group", "count", "mean_loss", "min_loss", "max_loss"])?;
    for (n, g) in keys {
        let v: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.job.n == n && o.job.group == g)
            .map(|o| o.final_loss)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            n.to_string(),
            g.to_string(),
            v.len().to_string(),
            format!("{mean:.10e}"),
            format!("{min:.10e}"),
            format!("{max:.10e}"),
        ])?;
    }
    Ok(crate::text::csv_string(w)?)
}

pub fn ratios_csv(width: usize, ratios: &[TransferRatio]) -> Result<String, TransferError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["width", "n", "ratio", "min_ratio", "max_ratio"])?;
    for r in ratios {
        w.write_record([
            width.to_string(),
            r.n.to_string(),
            format!("{:.10e}", r.ratio),
            format!("{:.10e}", r.min),
            format!("{:.10e}", r.max),
        ])?;
    }
    Ok(crate::text::csv_string(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::uniform_widths;

    fn donor() -> Mlp {
        Mlp::glorot_init(&uniform_widths(5, 4), &mut rng_for(99, Stream::Init)).unwrap()
    }

    #[test]
    fn splice_copies_leading_layers_only() {
        let d = donor();
        for n in 1..=4 {
            let (r, mask) = splice_recipient(&d, n, &mut rng_for(5, Stream::Init)).unwrap();
            for i in 0..5 {
                assert_eq!(r.layers()[i] == d.layers()[i], i < n, "n={n} layer {i}");
                assert_eq!(mask[i], i >= n);
            }
        }
        assert!(matches!(
            splice_recipient(&d, 0, &mut rng_for(5, Stream::Init)),
            Err(TransferError::DepthRange { .. })
        ));
        assert!(splice_recipient(&d, 5, &mut rng_for(5, Stream::Init)).is_err());
    }

    #[test]
    fn spliced_first_layer_matches_donor_activations() {
        let d = donor();
        let (r, _) = splice_recipient(&d, 1, &mut rng_for(6, Stream::Init)).unwrap();
        let pts = [[0.1, -0.4], [0.9, 0.9], [-1.0, 0.3]];
        assert_eq!(r.layer_activations(1, &pts).unwrap(), d.layer_activations(1, &pts).unwrap());
    }

    #[test]
    fn job_enumeration() {
        let jobs = protocol_jobs(XTenths(0), XTenths(6), &[1, 4], &[0, 1], 2);
        assert_eq!(jobs.len(), 4 * 2 * 4);
        let j = jobs[0];
        assert_eq!(j.task(), XTenths(0));
        let t = TransferJob {
            group: Group::TransferFrozen,
            ..j
        };
        assert_eq!(t.task(), XTenths(6));
        assert_eq!(t.recipient_seed(16, 4), j.recipient_seed(16, 4));
        assert_ne!(j.recipient_seed(16, 4), derive_seed(0, 0, 4, 16, 0));
        for g in Group::ALL {
            assert_eq!(g.to_string().parse::<Group>().unwrap(), g);
        }
    }

    fn outcome(group: Group, n: usize, loss: f64) -> TransferOutcome {
        TransferOutcome {
            job: TransferJob {
                group,
                n,
                x_a: XTenths(0),
                x_b: XTenths(6),
                donor_seed: 0,
                recipient: 0,
            },
            width: 16,
            recipient_seed: 1,
            final_loss: loss,
            epochs: 10,
        }
    }

    #[test]
    fn ratio_of_scaled_losses() {
        let mut v = Vec::new();
        for (i, s) in [1.0, 2.0, 3.0].iter().enumerate() {
            v.push(outcome(Group::SelfferFrozen, 2, *s));
            v.push(outcome(Group::TransferFrozen, 2, 5.0 * s));
            v.push(outcome(Group::TransferRetrained, 2, 100.0 + i as f64));
        }
        let r = transfer_specificity(&v, 2).unwrap();
        assert_eq!(r.ratio, 5.0);
        assert_eq!(r.min, 5.0 / 3.0);
        assert_eq!(r.max, 15.0);
        assert!(matches!(transfer_specificity(&v, 3), Err(TransferError::MissingGroup(_))));
        let csv = outcomes_csv(&v).unwrap();
        assert_eq!(csv.lines().count(), 10);
        assert_eq!(group_summary_csv(&v).unwrap().lines().count(), 4);
    }

    #[test]
    fn missing_donors_are_listed() {
        let jobs = protocol_jobs(XTenths(0), XTenths(6), &[1], &[3, 7], 1);
        let donors = vec![(3, donor())];
        match run_protocol(&donors, &jobs, &BvpSpec::default(), &TrainConfig::default()) {
            Err(TransferError::MissingDonors(m)) => assert_eq!(m, vec![7]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frozen_training_keeps_transferred_layers() {
        let d = donor();
        let config = TrainConfig {
            resample_every: 5,
            eval_every: 10,
            patience: 2,
            n_interior: 30,
            n_per_edge: 5,
            test_scale: 2,
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let job = protocol_jobs(XTenths(0), XTenths(6), &[2], &[0], 1)[2];
        assert_eq!(job.group, Group::TransferFrozen);
        let (net, record, outcome) = run_job(&job, &d, &BvpSpec::default(), &config).unwrap();
        assert_eq!(net.layers()[0], d.layers()[0]);
        assert_eq!(net.layers()[1], d.layers()[1]);
        assert_eq!(record.spec.x_source, 0.6);
        assert_eq!(outcome.final_loss, record.final_test_loss);
    }
}
