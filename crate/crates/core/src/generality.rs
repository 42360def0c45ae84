//! Ensemble similarity matrices, their decomposition into self, same-task and
//! cross-task groups, and the reproducibility and specificity metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::bvp::PgmImage;
use crate::net::Mlp;
use crate::svcca::{cca, sample_activations, ActivationMatrix, SampleSpec, SvccaError};
use crate::text::{join_f64, parse_f64_list, split_key_value, write_atomic, LineCursor};

#[derive(Debug, Error)]
pub enum GeneralityError {
    #[error("networks disagree in architecture: {0:?} vs {1:?}")]
    Architecture(Vec<usize>, Vec<usize>),
    #[error("ensemble is not grouped by source position: x'={0} appears in two blocks")]
    NotGrouped(String),
    #[error("ensemble index has {index} members but {given} networks were given")]
    Count { index: usize, given: usize },
    #[error("empty ensemble")]
    Empty,
    #[error("`{0}` is not a multiple of 0.1")]
    OffGrid(f64),
    #[error("no {0} entries to compute this metric")]
    MissingGroup(&'static str),
    #[error("zero mean in the {0} group")]
    ZeroMean(&'static str),
    #[error(transparent)]
    Svcca(#[from] SvccaError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("file ends before `{0}`")]
    MissingSection(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Source position in tenths, so Δx' bins are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct XTenths(pub i64);

impl XTenths {
    pub fn from_f64(x: f64) -> Result<Self, GeneralityError> {
        let t = (x * 10.0).round();
        if !x.is_finite() || (x * 10.0 - t).abs() > 1e-9 {
            return Err(GeneralityError::OffGrid(x));
        }
        Ok(XTenths(t as i64))
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

impl std::fmt::Display for XTenths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        write!(f, "{sign}{}.{}", self.0.abs() / 10, self.0.abs() % 10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Member {
    pub x: XTenths,
    pub seed: u64,
}

impl std::fmt::Display for Member {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x{}/s{}", self.x, self.seed)
    }
}

/// Ordered ensemble membership; seeds of one source position are contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnsembleIndex {
    pub members: Vec<Member>,
    /// Full width list `[2, h, …, h, 1]`.
    pub widths: Vec<usize>,
}

impl EnsembleIndex {
    pub fn new(members: Vec<Member>, widths: Vec<usize>) -> Result<Self, GeneralityError> {
        if members.is_empty() {
            return Err(GeneralityError::Empty);
        }
        let mut closed = std::collections::HashSet::new();
        for pair in members.windows(2) {
            if pair[0].x != pair[1].x {
                closed.insert(pair[0].x);
                if closed.contains(&pair[1].x) {
                    return Err(GeneralityError::NotGrouped(pair[1].x.to_string()));
                }
            }
        }
        Ok(EnsembleIndex { members, widths })
    }

    /// The full grid: every position with seeds `0..seeds`.
    pub fn grid(positions: &[XTenths], seeds: u64, widths: Vec<usize>) -> Result<Self, GeneralityError> {
        let members = positions
            .iter()
            .flat_map(|&x| (0..seeds).map(move |seed| Member { x, seed }))
            .collect();
        Self::new(members, widths)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn width(&self) -> usize {
        self.widths[1]
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }
}

/// Layer-wise ρ between every pair of ensemble members.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub index: EnsembleIndex,
    pub values: Array2<f64>,
}

/// Activations of one layer for every member, computed once.
pub fn ensemble_activations(
    nets: &[Mlp],
    index: &EnsembleIndex,
    layer: usize,
    sample: &SampleSpec,
) -> Result<Vec<ActivationMatrix>, GeneralityError> {
    if nets.len() != index.len() {
        return Err(GeneralityError::Count {
            index: index.len(),
            given: nets.len(),
        });
    }
    nets.iter()
        .zip(&index.members)
        .map(|(net, member)| {
            let widths = net.widths();
            if widths != index.widths {
                return Err(GeneralityError::Architecture(index.widths.clone(), widths));
            }
            let mut a = sample_activations(net, layer, sample)?;
            a.network = member.to_string();
            Ok(a)
        })
        .collect()
}

/// ρ between two members, evaluated in a canonical member order so the
/// result does not depend on where they sit in the ensemble.
pub fn pair_similarity(
    (ma, a): (&Member, &ActivationMatrix),
    (mb, b): (&Member, &ActivationMatrix),
) -> Result<f64, GeneralityError> {
    let (first, second) = if ma <= mb { (a, b) } else { (b, a) };
    Ok(cca(first, second)?.similarity())
}

/// Builds the matrix from precomputed activations. Only the upper triangle
/// is computed; the diagonal is the self-similarity.
pub fn similarity_from_activations(
    acts: &[ActivationMatrix],
    index: &EnsembleIndex,
    layer: usize,
) -> Result<SimilarityMatrix, GeneralityError> {
    let n = index.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let rho = pair_similarity((&index.members[i], &acts[i]), (&index.members[j], &acts[j]))?;
            values[[i, j]] = rho;
            values[[j, i]] = rho;
        }
    }
    Ok(SimilarityMatrix {
        layer,
        index: index.clone(),
        values,
    })
}

pub fn build_similarity_matrix(
    nets: &[Mlp],
    index: &EnsembleIndex,
    layer: usize,
    sample: &SampleSpec,
) -> Result<SimilarityMatrix, GeneralityError> {
    let acts = ensemble_activations(nets, index, layer, sample)?;
    similarity_from_activations(&acts, index, layer)
}

const MATRIX_MAGIC: &str = "DENN-SIMILARITY";

impl SimilarityMatrix {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MATRIX_MAGIC}\nversion=1\nlayer={}\n", self.layer);
        writeln!(
            out,
            "widths={}",
            self.index.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(
            out,
            "members={}",
            self.index
                .members
                .iter()
                .map(|m| format!("{}:{}", m.x.0, m.seed))
                .collect::<Vec<_>>()
                .join(",")
        )
        .unwrap();
        writeln!(out, "matrix {}", self.values.nrows()).unwrap();
        for row in self.values.rows() {
            writeln!(out, "{}", join_f64(row.iter().copied())).unwrap();
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, GeneralityError> {
        let malformed = |line: usize, message: String| GeneralityError::Malformed { line, message };
        let mut cur = LineCursor::new(text);
        match cur.next_line() {
            Some((_, MATRIX_MAGIC)) => {}
            Some((line, other)) => return Err(malformed(line, format!("expected `{MATRIX_MAGIC}`, found `{other}`"))),
            None => return Err(GeneralityError::MissingSection(MATRIX_MAGIC.into())),
        }
        let mut next_kv = |key: &str| -> Result<(usize, &str), GeneralityError> {
            let (line, content) = cur.next_line().ok_or_else(|| GeneralityError::MissingSection(key.into()))?;
            match split_key_value(content) {
                Some((k, v)) if k == key => Ok((line, v)),
                _ => Err(malformed(line, format!("expected `{key}=...`, found `{content}`"))),
            }
        };
        let (line, version) = next_kv("version")?;
        if version != "1" {
            return Err(malformed(line, format!("unsupported version `{version}`")));
        }
        let (line, layer) = next_kv("layer")?;
        let layer: usize = layer.parse().map_err(|_| malformed(line, format!("invalid layer `{layer}`")))?;
        let (line, w) = next_kv("widths")?;
        let widths: Vec<usize> = w
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(line, format!("invalid widths `{w}`")))?;
        if widths.len() < 3 {
            return Err(malformed(line, "widths need input, hidden and output entries".into()));
        }
        let (line, m) = next_kv("members")?;
        let members: Vec<Member> = m
            .split(',')
            .map(|t| {
                let (x, s) = t.split_once(':')?;
                Some(Member {
                    x: XTenths(x.trim().parse().ok()?),
                    seed: s.trim().parse().ok()?,
                })
            })
            .collect::<Option<_>>()
            .ok_or_else(|| malformed(line, format!("invalid members `{m}`")))?;
        let index = EnsembleIndex::new(members, widths)?;
        let (line, header) = cur.next_line().ok_or_else(|| GeneralityError::MissingSection("matrix".into()))?;
        let n: usize = header
            .strip_prefix("matrix ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| malformed(line, format!("expected `matrix <n>`, found `{header}`")))?;
        if n != index.len() {
            return Err(malformed(line, format!("matrix size {n} but {} members", index.len())));
        }
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            let (line, row) = cur.next_line().ok_or_else(|| GeneralityError::MissingSection("matrix row".into()))?;
            let values = parse_f64_list(row).map_err(|m| malformed(line, m))?;
            if values.len() != n {
                return Err(malformed(line, format!("expected {n} values, found {}", values.len())));
            }
            data.extend(values);
        }
        match cur.next_line() {
            Some((_, "end")) => {}
            Some((line, other)) => return Err(malformed(line, format!("expected `end`, found `{other}`"))),
            None => return Err(GeneralityError::MissingSection("end".into())),
        }
        Ok(SimilarityMatrix {
            layer,
            index,
            values: Array2::from_shape_vec((n, n), data).expect("row lengths checked"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), GeneralityError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, GeneralityError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// CSV with a header row and column of member labels, fixed precision.
    pub fn to_csv(&self) -> Result<String, GeneralityError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let labels: Vec<String> = self.index.members.iter().map(|m| m.to_string()).collect();
        let mut header = vec!["member".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in labels.iter().zip(self.values.rows()) {
            let mut record = vec![label.clone()];
            record.extend(row.iter().map(|v| format!("{v:.8}")));
            w.write_record(&record)?;
        }
        Ok(crate::text::csv_string(w)?)
    }

    /// Grey-scale heat map, one pixel per entry, black at 0 and white at the
    /// largest entry.
    pub fn to_pgm(&self) -> PgmImage {
        let n = self.values.nrows();
        let max = self.values.iter().fold(0.0f64, |m, &v| m.max(v));
        let pixels = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
            .collect();
        PgmImage {
            width: n,
            height: n,
            pixels,
        }
    }
}

/// Summary statistics of one group of similarity entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Sample variance (n − 1 denominator), zero for a single entry.
    pub variance: f64,
}

impl GroupStats {
    /// Entries are sorted before summing, so the result does not depend on
    /// their order.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(GroupStats {
            mean,
            min: v[0],
            max: v[n - 1],
            count: n,
            variance,
        })
    }

    /// Squared relative standard error of the mean.
    fn rel_var_of_mean(&self) -> f64 {
        self.variance / self.count as f64 / (self.mean * self.mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub self_sim: GroupStats,
    /// Same position, different seeds; absent with one seed per position.
    pub same: Option<GroupStats>,
    /// Keyed by Δx' in tenths.
    pub cross: BTreeMap<i64, GroupStats>,
}

/// Partitions the entries of a similarity matrix into the self, same-task and
/// per-Δx' cross-task groups (upper triangle only).
pub fn decompose(matrix: &SimilarityMatrix) -> Result<LayerStats, GeneralityError> {
    let members = &matrix.index.members;
    EnsembleIndex::new(members.clone(), matrix.index.widths.clone())?;
    let n = members.len();
    let mut self_sim = Vec::with_capacity(n);
    let mut same = Vec::new();
    let mut cross: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        self_sim.push(matrix.values[[i, i]]);
        for j in i + 1..n {
            let v = matrix.values[[i, j]];
            let delta = (members[i].x.0 - members[j].x.0).abs();
            if delta == 0 {
                same.push(v);
            } else {
                cross.entry(delta).or_default().push(v);
            }
        }
    }
    Ok(LayerStats {
        layer: matrix.layer,
        self_sim: GroupStats::from_values(&self_sim).expect("non-empty ensemble"),
        same: GroupStats::from_values(&same),
        cross: cross
            .into_iter()
            .map(|(d, v)| (d, GroupStats::from_values(&v).expect("group has entries")))
            .collect(),
    })
}

/// A mean value with its propagated standard uncertainty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub uncertainty: f64,
}

/// `⟨ρ_{Δx'=0}⟩ / ⟨ρ_self⟩`.
pub fn reproducibility(stats: &LayerStats) -> Result<Measured, GeneralityError> {
    let same = stats.same.ok_or(GeneralityError::MissingGroup("same-position"))?;
    if stats.self_sim.mean == 0.0 {
        return Err(GeneralityError::ZeroMean("self"));
    }
    let value = same.mean / stats.self_sim.mean;
    let rel_var = if same.mean == 0.0 {
        0.0
    } else {
        same.rel_var_of_mean()
    } + stats.self_sim.rel_var_of_mean();
    Ok(Measured {
        value,
        uncertainty: value.abs() * rel_var.sqrt(),
    })
}

/// Mean over Δx' > 0 of `|⟨ρ₀⟩ − ⟨ρ_Δ⟩| / ⟨ρ₀⟩`.
pub fn specificity(stats: &LayerStats) -> Result<Measured, GeneralityError> {
    let same = stats.same.ok_or(GeneralityError::MissingGroup("same-position"))?;
    if stats.cross.is_empty() {
        return Err(GeneralityError::MissingGroup("cross-position"));
    }
    if same.mean == 0.0 {
        return Err(GeneralityError::ZeroMean("same-position"));
    }
    let d = stats.cross.len() as f64;
    let mut value = 0.0;
    let mut variance = 0.0;
    for g in stats.cross.values() {
        let ratio = g.mean / same.mean;
        value += (1.0 - ratio).abs();
        let cross_rel = if g.mean == 0.0 { 0.0 } else { g.rel_var_of_mean() };
        variance += ratio * ratio * (cross_rel + same.rel_var_of_mean());
    }
    Ok(Measured {
        value: value / d,
        uncertainty: variance.sqrt() / d,
    })
}

/// One row of the metrics report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub width: usize,
    pub layer: usize,
    pub dimensionality: GroupStats,
    pub reproducibility: Measured,
    pub specificity: Measured,
}

impl MetricsRow {
    pub fn from_stats(width: usize, stats: &LayerStats) -> Result<Self, GeneralityError> {
        Ok(MetricsRow {
            width,
            layer: stats.layer,
            dimensionality: stats.self_sim,
            reproducibility: reproducibility(stats)?,
            specificity: specificity(stats)?,
        })
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "width",
    "layer",
    "dimensionality_mean",
    "dimensionality_min",
    "dimensionality_max",
    "reproducibility",
    "reproducibility_uncertainty",
    "specificity",
    "specificity_uncertainty",
];

pub fn metrics_report(rows: &[MetricsRow]) -> Result<String, GeneralityError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.width.to_string(),
            r.layer.to_string(),
            format!("{:.6}", r.dimensionality.mean),
            format!("{:.6}", r.dimensionality.min),
            format!("{:.6}", r.dimensionality.max),
            format!("{:.6}", r.reproducibility.value),
            format!("{:.6}", r.reproducibility.uncertainty),
            format!("{:.6}", r.specificity.value),
            format!("{:.6}", r.specificity.uncertainty),
        ])?;
    }
    Ok(crate::text::csv_string(w)?)
}

/// Group statistics as CSV: one row per group with its Δx' in tenths
/// (`self` and `same` rows use Δx' = 0).
pub fn stats_csv(stats: &[LayerStats]) -> Result<String, GeneralityError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "group", "delta_x", "count", "mean", "min", "max", "variance"])?;
    for s in stats {
        let mut groups: Vec<(&str, String, GroupStats)> = vec![("self", "0.0".into(), s.self_sim)];
        if let Some(same) = s.same {
            groups.push(("same", "0.0".into(), same));
        }
        for (&d, &g) in &s.cross {
            groups.push(("cross", XTenths(d).to_string(), g));
        }
        for (name, delta, g) in groups {
            w.write_record([
                s.layer.to_string(),
                name.to_string(),
                delta,
                g.count.to_string(),
                format!("{:.8}", g.mean),
                format!("{:.8}", g.min),
                format!("{:.8}", g.max),
                format!("{:.8}", g.variance),
            ])?;
        }
    }
    Ok(crate::text::csv_string(w)?)
}
