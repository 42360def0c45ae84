//! One function per subcommand, plus the resumable training executor they
//! share.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use denn_core::net::checkpoint::Checkpoint;
use denn_core::trainer::TrainError;
use denn_core::{BvpSpec, Mlp, TrainConfig, TrainRecord};
use rayon::prelude::*;

use crate::config::{ConfigError, RunId};
use crate::store::{self, Manifest, CHECKPOINT, RECORD, TIMING};
use crate::{CliError, Context};

mod analyze;
mod components;
mod oracle;
mod train;
mod transfer;

pub use analyze::{analyze, metrics};
pub use components::{components, Compare};
pub use oracle::oracle;
pub use train::train;
pub use transfer::transfer;

/// What a finished run directory must contain for it to be reused.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Expected {
    pub config: TrainConfig,
    pub spec: BvpSpec,
    pub widths: Vec<usize>,
    pub trainable: Vec<bool>,
}

impl Expected {
    fn check(&self, dir: &str, record: &TrainRecord) -> Result<(), CliError> {
        let same = record.config == self.config
            && record.spec == self.spec
            && record.widths == self.widths
            && record.trainable == self.trainable;
        if same {
            Ok(())
        } else {
            Err(ConfigError {
                path: dir.to_string(),
                message: "holds a run trained with different settings; use a fresh output root".into(),
            }
            .into())
        }
    }
}

type Work<'a> = Box<dyn Fn() -> Result<(Mlp, TrainRecord), TrainError> + Send + Sync + 'a>;

pub(crate) struct Job<'a> {
    pub label: String,
    /// Directory relative to the output root.
    pub dir: String,
    pub expected: Expected,
    pub work: Work<'a>,
}

pub(crate) struct Executed {
    /// Record of every job that is complete, in job order.
    pub records: Vec<Option<TrainRecord>>,
    pub error: Option<CliError>,
}

/// Reads a finished run. `Ok(None)` means the run has to be (re)trained.
fn completed(root: &Path, job: &Job) -> Result<Option<TrainRecord>, CliError> {
    let dir = root.join(&job.dir);
    let Ok(text) = std::fs::read_to_string(dir.join(RECORD)) else {
        return Ok(None);
    };
    let Ok(record) = TrainRecord::parse(&text) else {
        eprintln!("{}: unreadable record, retraining", job.label);
        return Ok(None);
    };
    job.expected.check(&job.dir, &record)?;
    match std::fs::read_to_string(dir.join(CHECKPOINT)).map(|t| Checkpoint::parse(&t)) {
        Ok(Ok(c)) if c.net.widths() == job.expected.widths => Ok(Some(record)),
        _ => {
            eprintln!("{}: unreadable checkpoint, retraining", job.label);
            Ok(None)
        }
    }
}

/// The record goes last: a run counts as complete once its record parses.
fn persist(root: &Path, job: &Job, net: Mlp, record: &TrainRecord, seconds: f64) -> Result<(), CliError> {
    let dir = root.join(&job.dir);
    let checkpoint = Checkpoint::new(net, record.seed());
    store::write_atomic(&dir.join(CHECKPOINT), checkpoint.to_text().as_bytes())?;
    store::write_atomic(&dir.join(RECORD), record.to_text().as_bytes())?;
    store::write_atomic(&dir.join(TIMING), format!("wall_time_s={seconds:.3}\n").as_bytes())?;
    Ok(())
}

/// Trains every job that is not already complete on the context's pool.
pub(crate) fn execute(ctx: &Context, jobs: &[Job]) -> Result<Executed, CliError> {
    let mut records = Vec::with_capacity(jobs.len());
    for job in jobs {
        records.push(completed(&ctx.root, job)?);
    }
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| records[i].is_none()).collect();
    if pending.is_empty() {
        eprintln!("all {} runs already complete", jobs.len());
        return Ok(Executed { records, error: None });
    }
    eprintln!("{} of {} runs to train on {} worker(s)", pending.len(), jobs.len(), ctx.jobs);
    let done = AtomicUsize::new(0);
    let pool = ctx.pool()?;
    let results: Vec<Result<TrainRecord, CliError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let job = &jobs[i];
                let start = Instant::now();
                let outcome = (job.work)();
                let seconds = start.elapsed().as_secs_f64();
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                match outcome {
                    Ok((net, record)) => {
                        persist(&ctx.root, job, net, &record, seconds)?;
                        eprintln!(
                            "[{k}/{}] {}: test loss {:.3e} at epoch {} ({:.0} s)",
                            pending.len(),
                            job.label,
                            record.final_test_loss,
                            record.best_epoch,
                            seconds
                        );
                        Ok(record)
                    }
                    Err(e @ TrainError::NonFinite { .. }) => {
                        let TrainError::NonFinite { record, .. } = &e else { unreachable!() };
                        let text = format!("error={e}\n{}", record.to_text());
                        store::write_atomic(&ctx.root.join(&job.dir).join("failure.txt"), text.as_bytes())?;
                        eprintln!("[{k}/{}] {}: {e}", pending.len(), job.label);
                        Err(CliError::Numerical(format!("{}: {e}", job.label)))
                    }
                    Err(e) => Err(CliError::failed(&job.label, e)),
                }
            })
            .collect()
    });
    let mut numerical = Vec::new();
    let mut other = None;
    for (&i, result) in pending.iter().zip(results) {
        match result {
            Ok(record) => records[i] = Some(record),
            Err(CliError::Numerical(m)) => numerical.push(m),
            Err(e) => {
                other.get_or_insert(e);
            }
        }
    }
    let error = other.or_else(|| (!numerical.is_empty()).then(|| CliError::Numerical(numerical.join("; "))));
    Ok(Executed { records, error })
}

/// Loads the checkpoint of a base run after checking it against the train
/// manifest and the run's record against the current configuration.
pub(crate) fn load_run(ctx: &Context, manifest: &Manifest, run: &RunId) -> Result<(Mlp, TrainRecord), CliError> {
    let dir = store::run_dir(run);
    let record_rel = format!("{dir}/{RECORD}");
    if !manifest.contains(&record_rel) {
        return Err(CliError::MissingInput(format!("run {run} has not been trained; run `denn train` first")));
    }
    let record = TrainRecord::parse(&manifest.require_text(&ctx.root, &record_rel)?)
        .map_err(|e| CliError::failed(&record_rel, e))?;
    let expected = Expected {
        config: ctx.plan.run_config(run),
        spec: ctx.plan.spec_at(run.x),
        widths: ctx.plan.full_widths(run.width),
        trainable: vec![true; ctx.plan.depth + 1],
    };
    expected.check(&dir, &record)?;
    let checkpoint_rel = format!("{dir}/{CHECKPOINT}");
    let checkpoint = Checkpoint::parse(&manifest.require_text(&ctx.root, &checkpoint_rel)?)
        .map_err(|e| CliError::failed(&checkpoint_rel, e))?;
    Ok((checkpoint.net, record))
}

/// Loads several base runs, reporting every missing one at once.
pub(crate) fn load_runs(ctx: &Context, manifest: &Manifest, runs: &[RunId]) -> Result<Vec<(Mlp, TrainRecord)>, CliError> {
    let missing: Vec<String> = runs
        .iter()
        .filter(|r| !manifest.contains(&format!("{}/{RECORD}", store::run_dir(r))))
        .map(|r| r.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingInput(format!(
            "runs not yet trained: {}; run `denn train` first",
            missing.join(", ")
        )));
    }
    runs.iter().map(|r| load_run(ctx, manifest, r)).collect()
}

pub(crate) fn fixed(v: f64) -> String {
    format!("{v:.8}")
}

pub(crate) fn sci(v: f64) -> String {
    format!("{v:.8e}")
}

pub(crate) fn csv_text(rows: Vec<Vec<String>>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::failed("csv", e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::failed("csv", e.error()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}
