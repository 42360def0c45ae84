use denn_core::trainer;

use super::{execute, Expected, Job};
use crate::store::{self, Manifest, CHECKPOINT, RECORD};
use crate::{CliError, Context, Select};

pub fn train(ctx: &Context, select: &Select) -> Result<(), CliError> {
    ctx.check_width(select.width)?;
    ctx.check_seed("--seed", select.seed)?;
    let x = select.xprime.map(|x| ctx.xprime("--xprime", x)).transpose()?;
    let plan = &ctx.plan;
    let all = plan.runs();
    let chosen: Vec<_> = all
        .iter()
        .filter(|r| select.width.is_none_or(|w| w == r.width))
        .filter(|r| x.is_none_or(|x| x == r.x))
        .filter(|r| select.seed.is_none_or(|s| s == r.seed))
        .copied()
        .collect();
    let jobs: Vec<Job> = chosen
        .iter()
        .map(|run| {
            let spec = plan.spec_at(run.x);
            let widths = plan.full_widths(run.width);
            let config = plan.run_config(run);
            Job {
                label: run.to_string(),
                dir: store::run_dir(run),
                expected: Expected {
                    config: config.clone(),
                    spec,
                    widths: widths.clone(),
                    trainable: vec![true; widths.len() - 1],
                },
                work: Box::new(move || trainer::train(&spec, &widths, &config)),
            }
        })
        .collect();
    let executed = execute(ctx, &jobs)?;

    // The manifest covers every complete run of the grid, selected or not.
    let mut manifest = Manifest::new("train");
    for run in &all {
        let dir = store::run_dir(run);
        let record = ctx.root.join(&dir).join(RECORD);
        let fresh = chosen.iter().position(|c| c == run).map(|i| executed.records[i].is_some());
        let complete = fresh.unwrap_or_else(|| {
            std::fs::read_to_string(&record)
                .ok()
                .and_then(|t| denn_core::TrainRecord::parse(&t).ok())
                .is_some()
        });
        if complete {
            manifest.add(&ctx.root, &format!("{dir}/{CHECKPOINT}"))?;
            manifest.add(&ctx.root, &format!("{dir}/{RECORD}"))?;
        }
    }
    manifest.save(&ctx.root)?;
    match executed.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
