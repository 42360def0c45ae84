use denn_core::trainer::{rng_for, train_from, Stream};
use denn_core::transfer::{
    group_summary_csv, outcomes_csv, protocol_jobs, ratios_csv, splice_recipient, transfer_specificity, TransferMode,
    TransferOutcome,
};
use denn_core::BvpSpec;

use super::{csv_text, execute, load_runs, sci, Expected, Job};
use crate::config::RunId;
use crate::store::{self, Manifest, CHECKPOINT, RECORD};
use crate::{CliError, Context};

pub fn transfer(ctx: &Context) -> Result<(), CliError> {
    let plan = &ctx.plan;
    let tp = &plan.transfer;
    let width = tp.width;
    let train_manifest = Manifest::load(&ctx.root, "train")?;
    let base_runs: Vec<RunId> = (0..plan.seeds).map(|seed| RunId { width, x: tp.x_a, seed }).collect();
    let base = load_runs(ctx, &train_manifest, &base_runs)?;
    let donors: Vec<_> = tp.donor_seeds.iter().map(|&s| base[s as usize].0.clone()).collect();

    let specs = protocol_jobs(tp.x_a, tp.x_b, &tp.ns, &tp.donor_seeds, tp.recipients);
    let dir = store::transfer_dir(width);
    let depth = plan.depth;
    let mut jobs = Vec::with_capacity(specs.len());
    for spec in &specs {
        let donor = &donors[spec.donor_seed as usize];
        let seed = spec.recipient_seed(width, depth);
        let (recipient, frozen_mask) = splice_recipient(donor, spec.n, &mut rng_for(seed, Stream::Init))
            .map_err(|e| CliError::failed(&spec.label(), e))?;
        let mask = match spec.group.mode() {
            TransferMode::Frozen => frozen_mask,
            TransferMode::Retrained => vec![true; depth + 1],
        };
        let task = BvpSpec {
            x_source: spec.task().value(),
            ..plan.base
        };
        let config = plan.train.with_seed(seed);
        let expected = Expected {
            config: config.clone(),
            spec: task,
            widths: plan.full_widths(width),
            trainable: mask.clone(),
        };
        jobs.push(Job {
            label: format!("w{width}/{}", spec.label()),
            dir: format!("{dir}/{}", spec.label()),
            expected,
            work: Box::new(move || train_from(recipient.clone(), &mask, &task, &config)),
        });
    }
    let executed = execute(ctx, &jobs)?;

    let mut manifest = Manifest::new("transfer");
    let mut outcomes = Vec::new();
    for ((job, spec), record) in jobs.iter().zip(&specs).zip(&executed.records) {
        if let Some(record) = record {
            manifest.add(&ctx.root, &format!("{}/{CHECKPOINT}", job.dir))?;
            manifest.add(&ctx.root, &format!("{}/{RECORD}", job.dir))?;
            outcomes.push(TransferOutcome {
                job: *spec,
                width,
                recipient_seed: record.seed(),
                final_loss: record.final_test_loss,
                epochs: record.epochs_trained,
            });
        }
    }
    if let Some(e) = executed.error {
        manifest.save(&ctx.root)?;
        return Err(e);
    }

    let root = ctx.root.join(&dir);
    fn fail(what: &'static str) -> impl Fn(denn_core::transfer::TransferError) -> CliError {
        move |e| CliError::failed(what, e)
    }
    store::write_atomic(&root.join("outcomes.csv"), outcomes_csv(&outcomes).map_err(fail("outcomes"))?.as_bytes())?;
    store::write_atomic(&root.join("groups.csv"), group_summary_csv(&outcomes).map_err(fail("groups"))?.as_bytes())?;
    let ratios = tp
        .ns
        .iter()
        .map(|&n| transfer_specificity(&outcomes, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail("transfer specificity"))?;
    store::write_atomic(&root.join("ratios.csv"), ratios_csv(width, &ratios).map_err(fail("ratios"))?.as_bytes())?;
    let mut rows = vec![["width", "x", "seed", "final_test_loss", "epochs"].map(String::from).to_vec()];
    for (run, (_, record)) in base_runs.iter().zip(&base) {
        rows.push(vec![
            width.to_string(),
            run.x.to_string(),
            run.seed.to_string(),
            sci(record.final_test_loss),
            record.epochs_trained.to_string(),
        ]);
    }
    store::write_atomic(&root.join("base.csv"), csv_text(rows)?.as_bytes())?;
    for name in ["outcomes.csv", "groups.csv", "ratios.csv", "base.csv"] {
        manifest.add(&ctx.root, &format!("{dir}/{name}"))?;
    }
    manifest.save(&ctx.root)?;
    for r in &ratios {
        eprintln!("n={}: transfer specificity {:.3e} (range {:.3e} to {:.3e})", r.n, r.ratio, r.min, r.max);
    }
    Ok(())
}
