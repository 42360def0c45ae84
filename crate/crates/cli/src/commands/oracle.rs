use denn_core::bvp::{fd_solve, relative_l2_error};
use denn_core::generality::XTenths;
use denn_core::GridField;
use rayon::prelude::*;

use super::{csv_text, load_run, sci};
use crate::store::{self, Manifest, RECORD};
use crate::{CliError, Context, Select};

pub fn oracle(ctx: &Context, select: &Select) -> Result<(), CliError> {
    ctx.check_width(select.width)?;
    ctx.check_seed("--seed", select.seed)?;
    let x = select.xprime.map(|x| ctx.xprime("--xprime", x)).transpose()?;
    let plan = &ctx.plan;
    let positions: Vec<XTenths> = plan.positions.iter().copied().filter(|p| x.is_none_or(|x| x == *p)).collect();
    let pool = ctx.pool()?;
    let fields: Vec<(XTenths, GridField)> = pool.install(|| {
        positions
            .par_iter()
            .map(|&p| {
                fd_solve(&plan.spec_at(p), plan.oracle_n)
                    .map(|f| (p, f))
                    .map_err(|e| CliError::Numerical(format!("oracle at x' = {p}: {e}")))
            })
            .collect::<Result<_, _>>()
    })?;
    for (p, field) in &fields {
        let dir = ctx.root.join(store::oracle_dir(*p));
        store::write_atomic(&dir.join("field.txt"), field.to_text().as_bytes())?;
        field
            .write_pgm(&dir.join("field.pgm"))
            .map_err(|e| CliError::failed("oracle image", e))?;
    }

    let manifest = Manifest::load(&ctx.root, "train")?;
    let runs: Vec<_> = plan
        .runs()
        .into_iter()
        .filter(|r| select.width.is_none_or(|w| w == r.width))
        .filter(|r| x.is_none_or(|x| x == r.x))
        .filter(|r| select.seed.is_none_or(|s| s == r.seed))
        .filter(|r| manifest.contains(&format!("{}/{RECORD}", store::run_dir(r))))
        .collect();
    if runs.is_empty() {
        return Err(CliError::MissingInput("no trained run matches the selection; run `denn train` first".into()));
    }
    let rows: Vec<Vec<String>> = pool.install(|| {
        runs.par_iter()
            .map(|run| {
                let (net, record) = load_run(ctx, &manifest, run)?;
                let field = &fields.iter().find(|(p, _)| *p == run.x).expect("oracle for every selected position").1;
                let err = relative_l2_error(&net, field).map_err(|e| CliError::Numerical(format!("{run}: {e}")))?;
                Ok(vec![
                    run.width.to_string(),
                    run.x.to_string(),
                    run.seed.to_string(),
                    sci(err),
                    sci(record.final_test_loss),
                    record.epochs_trained.to_string(),
                ])
            })
            .collect::<Result<_, CliError>>()
    })?;
    let mut table = vec![["width", "x", "seed", "relative_l2", "final_test_loss", "epochs"].map(String::from).to_vec()];
    table.extend(rows);
    store::write_atomic(&ctx.root.join("oracle/errors.csv"), csv_text(table)?.as_bytes())?;
    let mut out = Manifest::new("oracle");
    out.add_tree(&ctx.root, "oracle")?;
    out.save(&ctx.root)?;
    Ok(())
}
