use denn_core::bvp::PgmScale;
use denn_core::generality::{
    decompose, metrics_report, pair_similarity, stats_csv, EnsembleIndex, LayerStats, MetricsRow, SimilarityMatrix,
    XTenths,
};
use denn_core::svcca::{centred_spectrum, sample_activations, svcca_similarity, ActivationMatrix};
use ndarray::Array2;
use rayon::prelude::*;

use super::{csv_text, fixed, load_runs};
use crate::config::RunId;
use crate::store::{self, Manifest};
use crate::{CliError, Context};

fn layer_dir(width: usize, layer: usize) -> String {
    format!("{}/layer{layer}", store::analysis_dir(width))
}

fn matrix_rel(width: usize, layer: usize) -> String {
    format!("{}/matrix.txt", layer_dir(width, layer))
}

/// Upper triangle computed on the pool; every pair in canonical order.
fn similarity_matrix(
    ctx: &Context,
    pool: &rayon::ThreadPool,
    acts: &[ActivationMatrix],
    index: &EnsembleIndex,
    layer: usize,
) -> Result<SimilarityMatrix, CliError> {
    let n = index.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let threshold = ctx.plan.threshold;
    let values: Vec<f64> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let (mi, mj) = (&index.members[i], &index.members[j]);
                match threshold {
                    None => pair_similarity((mi, &acts[i]), (mj, &acts[j])).map_err(|e| e.to_string()),
                    Some(f) => {
                        let (a, b) = if mi <= mj { (i, j) } else { (j, i) };
                        svcca_similarity(&acts[a], &acts[b], Some(f)).map_err(|e| e.to_string())
                    }
                }
                .map_err(|e| CliError::Numerical(format!("layer {layer}, {mi} vs {mj}: {e}")))
            })
            .collect::<Result<_, _>>()
    })?;
    let mut m = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(values) {
        m[[i, j]] = v;
        m[[j, i]] = v;
    }
    Ok(SimilarityMatrix {
        layer,
        index: index.clone(),
        values: m,
    })
}

fn write_matrix(ctx: &Context, width: usize, matrix: &SimilarityMatrix) -> Result<(), CliError> {
    let dir = ctx.root.join(layer_dir(width, matrix.layer));
    let csv = matrix.to_csv().map_err(|e| CliError::failed("similarity csv", e))?;
    let max = matrix.values.iter().fold(0.0f64, |m, &v| m.max(v));
    store::write_atomic(&dir.join("matrix.txt"), matrix.to_text().as_bytes())?;
    store::write_atomic(&dir.join("matrix.csv"), csv.as_bytes())?;
    store::write_atomic(&dir.join("matrix.pgm"), &matrix.to_pgm().to_bytes())?;
    store::write_atomic(&dir.join("matrix.pgm.txt"), PgmScale { min: 0.0, max }.to_text().as_bytes())?;
    Ok(())
}

/// Mean, min and max similarity against Δx', the same-position group at 0.
fn lines_rows(stats: &[LayerStats]) -> Vec<Vec<String>> {
    let mut rows = vec![["layer", "delta_x", "count", "mean", "min", "max", "mean_over_self"]
        .map(String::from)
        .to_vec()];
    for s in stats {
        let groups = s.same.map(|g| (0, g)).into_iter().chain(s.cross.iter().map(|(&d, &g)| (d, g)));
        for (d, g) in groups {
            rows.push(vec![
                s.layer.to_string(),
                XTenths(d).to_string(),
                g.count.to_string(),
                fixed(g.mean),
                fixed(g.min),
                fixed(g.max),
                fixed(g.mean / s.self_sim.mean),
            ]);
        }
    }
    rows
}

pub fn analyze(ctx: &Context, width: Option<usize>) -> Result<(), CliError> {
    ctx.check_width(width)?;
    let plan = &ctx.plan;
    let manifest = Manifest::load(&ctx.root, "train")?;
    let pool = ctx.pool()?;
    for &w in plan.widths.iter().filter(|&&w| width.is_none_or(|sel| sel == w)) {
        let index = EnsembleIndex::grid(&plan.positions, plan.seeds, plan.full_widths(w))
            .map_err(|e| CliError::failed("ensemble", e))?;
        let runs: Vec<RunId> = index
            .members
            .iter()
            .map(|m| RunId {
                width: w,
                x: m.x,
                seed: m.seed,
            })
            .collect();
        let nets: Vec<_> = load_runs(ctx, &manifest, &runs)?.into_iter().map(|(net, _)| net).collect();
        let mut stats = Vec::new();
        let mut spectra = vec![["layer", "member", "index", "sigma_over_sigma1"].map(String::from).to_vec()];
        for layer in 1..=plan.depth {
            let acts: Vec<ActivationMatrix> = pool.install(|| {
                nets.par_iter()
                    .zip(&index.members)
                    .map(|(net, m)| {
                        let mut a = sample_activations(net, layer, &plan.sample).map_err(|e| CliError::failed("activations", e))?;
                        a.network = m.to_string();
                        Ok(a)
                    })
                    .collect::<Result<_, CliError>>()
            })?;
            let matrix = similarity_matrix(ctx, &pool, &acts, &index, layer)?;
            write_matrix(ctx, w, &matrix)?;
            stats.push(decompose(&matrix).map_err(|e| CliError::failed("decomposition", e))?);
            for (m, a) in index.members.iter().zip(&acts) {
                let s = centred_spectrum(&a.values).map_err(|e| CliError::Numerical(format!("{m} layer {layer}: {e}")))?;
                let top = s.first().copied().unwrap_or(0.0);
                for (k, v) in s.iter().enumerate() {
                    let ratio = if top > 0.0 { v / top } else { 0.0 };
                    spectra.push(vec![layer.to_string(), m.to_string(), (k + 1).to_string(), format!("{ratio:.6e}")]);
                }
            }
            eprintln!("width {w} layer {layer}: self-similarity {:.3}", stats.last().expect("pushed").self_sim.mean);
        }
        let dir = ctx.root.join(store::analysis_dir(w));
        let stats_text = stats_csv(&stats).map_err(|e| CliError::failed("stats csv", e))?;
        store::write_atomic(&dir.join("stats.csv"), stats_text.as_bytes())?;
        store::write_atomic(&dir.join("lines.csv"), csv_text(lines_rows(&stats))?.as_bytes())?;
        store::write_atomic(&dir.join("spectra.csv"), csv_text(spectra)?.as_bytes())?;
    }
    let mut out = Manifest::new("analyze");
    out.add_tree(&ctx.root, "analysis")?;
    out.save(&ctx.root)?;
    Ok(())
}

pub fn metrics(ctx: &Context, width: Option<usize>) -> Result<(), CliError> {
    ctx.check_width(width)?;
    let plan = &ctx.plan;
    let manifest = Manifest::load(&ctx.root, "analyze")?;
    let mut rows = Vec::new();
    for &w in plan.widths.iter().filter(|&&w| width.is_none_or(|sel| sel == w)) {
        for layer in 1..=plan.depth {
            let rel = matrix_rel(w, layer);
            if !manifest.contains(&rel) {
                return Err(CliError::MissingInput(format!("{rel}; run `denn analyze` first")));
            }
            let matrix = SimilarityMatrix::parse(&manifest.require_text(&ctx.root, &rel)?)
                .map_err(|e| CliError::failed(&rel, e))?;
            if matrix.index.width() != w || matrix.layer != layer {
                return Err(CliError::failed(&rel, "matrix does not belong to this width and layer"));
            }
            let stats = decompose(&matrix).map_err(|e| CliError::failed(&rel, e))?;
            rows.push(MetricsRow::from_stats(w, &stats).map_err(|e| CliError::Numerical(format!("{rel}: {e}")))?);
        }
    }
    let report = metrics_report(&rows).map_err(|e| CliError::failed("metrics csv", e))?;
    store::write_atomic(&ctx.root.join("metrics/metrics.csv"), report.as_bytes())?;
    let mut out = Manifest::new("metrics");
    out.add_tree(&ctx.root, "metrics")?;
    out.save(&ctx.root)?;
    Ok(())
}
