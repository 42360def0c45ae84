use denn_core::svcca::{
    cca, component_fields, linear_fit_correlation, principal_components, sample_activations, ComponentField, Components,
};
use ndarray::s;

use super::{csv_text, fixed, load_run};
use crate::config::{ConfigError, RunId};
use crate::store::{self, Manifest};
use crate::{CliError, Context, Select};

/// Optional second network for canonical components, and the layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compare {
    pub layer: Option<usize>,
    pub seed: Option<u64>,
    pub xprime: Option<f64>,
}

fn truncate(c: Components, count: usize) -> Components {
    let k = count.min(c.len());
    Components {
        mean: c.mean,
        directions: c.directions.slice(s![.., ..k]).to_owned(),
        values: c.values[..k].to_vec(),
    }
}

fn export(ctx: &Context, dir: &str, prefix: &str, fields: &[ComponentField]) -> Result<Vec<f64>, CliError> {
    let root = ctx.root.join(dir);
    let mut fits = Vec::with_capacity(fields.len());
    for (k, f) in fields.iter().enumerate() {
        let name = format!("{prefix}{}", k + 1);
        store::write_atomic(&root.join(format!("{name}.txt")), f.field.to_text().as_bytes())?;
        f.field
            .write_pgm(&root.join(format!("{name}.pgm")))
            .map_err(|e| CliError::failed("component image", e))?;
        fits.push(linear_fit_correlation(&f.field).map_err(|e| CliError::Numerical(format!("{name}: {e}")))?);
    }
    Ok(fits)
}

pub fn components(ctx: &Context, select: &Select, compare: &Compare) -> Result<(), CliError> {
    let plan = &ctx.plan;
    ctx.check_width(select.width)?;
    ctx.check_seed("--seed", select.seed)?;
    ctx.check_seed("--compare-seed", compare.seed)?;
    let layer = compare.layer.unwrap_or(plan.components.layer);
    if layer == 0 || layer > plan.depth {
        return Err(ConfigError {
            path: "--layer".into(),
            message: format!("must lie in 1..={}", plan.depth),
        }
        .into());
    }
    let run = RunId {
        width: select.width.unwrap_or(plan.widths[0]),
        x: match select.xprime {
            Some(x) => ctx.xprime("--xprime", x)?,
            None => plan.positions[0],
        },
        seed: select.seed.unwrap_or(0),
    };
    let manifest = Manifest::load(&ctx.root, "train")?;
    let (net, _) = load_run(ctx, &manifest, &run)?;
    let n = plan.components.grid;
    let domain = plan.base.domain;
    let acts = sample_activations(&net, layer, &plan.sample).map_err(|e| CliError::failed("activations", e))?;
    let base = format!("components/{}/{}/{}/layer{layer}", run.width, run.x, run.seed);

    let fail = |e: denn_core::svcca::SvccaError| CliError::Numerical(format!("{run} layer {layer}: {e}"));
    let pcs = truncate(principal_components(&acts).map_err(fail)?, plan.components.count);
    let fields = component_fields(&net, layer, &pcs, &domain, n).map_err(fail)?;
    let fits = export(ctx, &format!("{base}/principal"), "pc", &fields)?;
    let mut rows = vec![["index", "sigma_over_sigma1", "linear_fit_r"].map(String::from).to_vec()];
    for (k, (f, r)) in fields.iter().zip(&fits).enumerate() {
        rows.push(vec![(k + 1).to_string(), fixed(f.value), fixed(*r)]);
    }
    store::write_atomic(&ctx.root.join(format!("{base}/principal/values.csv")), csv_text(rows)?.as_bytes())?;
    eprintln!("{run} layer {layer}: leading principal field linear fit r = {:.4}", fits.first().copied().unwrap_or(0.0));

    if compare.seed.is_some() || compare.xprime.is_some() {
        let other = RunId {
            width: run.width,
            x: match compare.xprime {
                Some(x) => ctx.xprime("--compare-xprime", x)?,
                None => run.x,
            },
            seed: compare.seed.unwrap_or(run.seed),
        };
        let (net_b, _) = load_run(ctx, &manifest, &other)?;
        let acts_b = sample_activations(&net_b, layer, &plan.sample).map_err(|e| CliError::failed("activations", e))?;
        let result = cca(&acts, &acts_b).map_err(fail)?;
        let dir = format!("{base}/canonical/{}/{}", other.x, other.seed);
        let count = plan.components.count;
        let fa = component_fields(&net, layer, &truncate(result.components_a(), count), &domain, n).map_err(fail)?;
        let fb = component_fields(&net_b, layer, &truncate(result.components_b(), count), &domain, n).map_err(fail)?;
        let ra = export(ctx, &dir, "a", &fa)?;
        let rb = export(ctx, &dir, "b", &fb)?;
        let mut rows = vec![["index", "correlation", "linear_fit_r_a", "linear_fit_r_b"].map(String::from).to_vec()];
        for k in 0..fa.len() {
            rows.push(vec![(k + 1).to_string(), fixed(fa[k].value), fixed(ra[k]), fixed(rb[k])]);
        }
        store::write_atomic(&ctx.root.join(format!("{dir}/values.csv")), csv_text(rows)?.as_bytes())?;
        result
            .write(&ctx.root.join(format!("{dir}/cca.txt")))
            .map_err(|e| CliError::failed("cca result", e))?;
    }
    let mut out = Manifest::new("components");
    out.add_tree(&ctx.root, "components")?;
    out.save(&ctx.root)?;
    Ok(())
}
