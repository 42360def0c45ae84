//! Canonical correlation analysis of layer activations, the summed-correlation
//! similarity ρ, the self-similarity (intrinsic dimensionality), and
//! component fields for visualisation.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::bvp::{grid_nodes, BvpError, GridField, Rect};
use crate::net::{Mlp, NetError};
use crate::text::{join_f64, parse_f64_list, split_key_value, write_atomic, LineCursor};

/// Data singular values at or below this fraction of the largest are treated
/// as zero. Squared, this is a 1e−12 relative cutoff on covariance spectra.
const RANK_CUTOFF: f64 = 1e-6;
/// Columns whose centred entries are all within this (relative) bound of zero
/// are constant.
const CONSTANT_TOL: f64 = 1e-12;
/// Numerical slack tolerated before clamping correlations into [0, 1].
const CLAMP_SLACK: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SvccaError {
    #[error("activation matrices come from different sample sets (`{0}` vs `{1}`)")]
    SampleMismatch(String, String),
    #[error("{points} sample points do not exceed {neurons} neurons")]
    TooFewPoints { points: usize, neurons: usize },
    #[error("activation matrix has no variance")]
    NoVariance,
    #[error("variance threshold {0} must lie in (0, 1]")]
    InvalidThreshold(f64),
    #[error("visualisation grid needs at least 2 nodes per side, got {0}")]
    GridTooSmall(usize),
    #[error("SVD did not converge")]
    Svd,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("file ends before `{0}`")]
    MissingSection(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic point set on which activations are sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    /// Nodes per side of a uniform grid including the boundary.
    pub n: usize,
    pub domain: Rect,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            n: 100,
            domain: Rect::UNIT_SQUARE,
        }
    }
}

impl SampleSpec {
    pub fn points(&self) -> Vec<[f64; 2]> {
        grid_nodes(self.n, self.n, &self.domain)
    }

    pub fn id(&self) -> String {
        let d = &self.domain;
        format!("grid{}x{}@{},{},{},{}", self.n, self.n, d.x0, d.x1, d.y0, d.y1)
    }
}

/// Post-activation outputs of one hidden layer, a row per sample point.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub values: Array2<f64>,
    /// 1-based hidden layer index.
    pub layer: usize,
    /// Free-form identity of the source network, e.g. `w20/x0.2/s1`.
    pub network: String,
    pub sample_id: String,
}

impl ActivationMatrix {
    pub fn new(values: Array2<f64>, layer: usize, network: impl Into<String>, sample_id: impl Into<String>) -> Result<Self, SvccaError> {
        let (points, neurons) = values.dim();
        if points <= neurons {
            return Err(SvccaError::TooFewPoints { points, neurons });
        }
        Ok(ActivationMatrix {
            values,
            layer,
            network: network.into(),
            sample_id: sample_id.into(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_neurons(&self) -> usize {
        self.values.ncols()
    }
}

pub fn sample_activations(net: &Mlp, layer: usize, sample: &SampleSpec) -> Result<ActivationMatrix, SvccaError> {
    let values = net.layer_activations(layer, &sample.points())?;
    ActivationMatrix::new(values, layer, "", sample.id())
}

/// Thin SVD of the centred, constant-column-free data.
struct Reduced {
    mean: Array1<f64>,
    /// Indices of the retained (non-constant) columns.
    kept: Vec<usize>,
    dropped: Vec<usize>,
    /// n × k left singular vectors with nonzero singular value.
    u: DMatrix<f64>,
    s: Vec<f64>,
    /// kept × k right singular vectors.
    v: DMatrix<f64>,
}

fn column_means(values: &Array2<f64>) -> Array1<f64> {
    values.mean_axis(Axis(0)).expect("non-empty matrix")
}

fn reduce(values: &Array2<f64>) -> Result<Reduced, SvccaError> {
    let mean = column_means(values);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in values.axis_iter(Axis(1)).enumerate() {
        let scale = col.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let spread = col.iter().fold(0.0f64, |m, v| m.max((v - mean[j]).abs()));
        if spread <= CONSTANT_TOL * scale {
            dropped.push(j);
        } else {
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(SvccaError::NoVariance);
    }
    let n = values.nrows();
    let centred = DMatrix::from_fn(n, kept.len(), |i, c| values[[i, kept[c]]] - mean[kept[c]]);
    let (u, s, v_t) = sorted_svd(centred)?;
    let top = s[0];
    let k = s.iter().take_while(|&&x| x > RANK_CUTOFF * top).count();
    Ok(Reduced {
        mean,
        kept,
        dropped,
        u: u.columns(0, k).into_owned(),
        s: s[..k].to_vec(),
        v: v_t.rows(0, k).transpose(),
    })
}

/// SVD with singular values in descending order.
fn sorted_svd(m: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>), SvccaError> {
    let svd = m.try_svd(true, true, f64::EPSILON, 0).ok_or(SvccaError::Svd)?;
    let u = svd.u.ok_or(SvccaError::Svd)?;
    let v_t = svd.v_t.ok_or(SvccaError::Svd)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    Ok((u, s, v_t))
}

/// Linear readout of variates from raw activations:
/// `variate_k(a) = Σ_j (a_j − mean_j) · directions[j, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub mean: Array1<f64>,
    /// n_neurons × k; rows of dropped columns are zero.
    pub directions: Array2<f64>,
    /// Correlation (canonical case) or σₖ/σ₁ (principal case) per component.
    pub values: Vec<f64>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self, activations: &Array2<f64>) -> Array2<f64> {
        (activations - &self.mean.view().insert_axis(Axis(0))).dot(&self.directions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcaResult {
    /// Descending, each in [0, 1].
    pub correlations: Vec<f64>,
    pub n_points: usize,
    pub mean_a: Array1<f64>,
    pub mean_b: Array1<f64>,
    /// n_neurons_A × k map from centred activations to unit-variance variates.
    pub projection_a: Array2<f64>,
    pub projection_b: Array2<f64>,
    /// Constant columns removed before whitening.
    pub dropped_a: Vec<usize>,
    pub dropped_b: Vec<usize>,
}

fn embed_projection(r: &Reduced, rotation: &DMatrix<f64>, n_cols: usize, scale: f64) -> Array2<f64> {
    // V S⁻¹ R, scattered back into the full column space.
    let k = rotation.ncols();
    let mut w = Array2::zeros((n_cols, k));
    for (row, &col) in r.kept.iter().enumerate() {
        for c in 0..k {
            let mut acc = 0.0;
            for i in 0..r.s.len() {
                acc += r.v[(row, i)] / r.s[i] * rotation[(i, c)];
            }
            w[[col, c]] = acc * scale;
        }
    }
    w
}

pub fn cca(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<CcaResult, SvccaError> {
    if a.sample_id != b.sample_id || a.n_points() != b.n_points() {
        return Err(SvccaError::SampleMismatch(a.sample_id.clone(), b.sample_id.clone()));
    }
    cca_values(&a.values, &b.values)
}

/// CCA on raw matrices whose rows are already known to correspond.
pub fn cca_values(a: &Array2<f64>, b: &Array2<f64>) -> Result<CcaResult, SvccaError> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(SvccaError::SampleMismatch(format!("{n} rows"), format!("{} rows", b.nrows())));
    }
    for m in [a, b] {
        if m.nrows() <= m.ncols() {
            return Err(SvccaError::TooFewPoints {
                points: m.nrows(),
                neurons: m.ncols(),
            });
        }
    }
    let ra = reduce(a)?;
    let rb = reduce(b)?;
    // Whitened cross-covariance Σ_AA^{−1/2} Σ_AB Σ_BB^{−1/2} equals U_Aᵀ U_B.
    let cross = ra.u.transpose() * &rb.u;
    let (p, sigma, q_t) = sorted_svd(cross)?;
    let k = sigma.len();
    let correlations: Vec<f64> = sigma
        .iter()
        .map(|&c| {
            debug_assert!(c <= 1.0 + CLAMP_SLACK.max(1e-6));
            c.clamp(0.0, 1.0)
        })
        .collect();
    let scale = ((n - 1) as f64).sqrt();
    let q = q_t.transpose();
    Ok(CcaResult {
        correlations,
        n_points: n,
        projection_a: embed_projection(&ra, &p.columns(0, k).into_owned(), a.ncols(), scale),
        projection_b: embed_projection(&rb, &q.columns(0, k).into_owned(), b.ncols(), scale),
        mean_a: ra.mean,
        mean_b: rb.mean,
        dropped_a: ra.dropped,
        dropped_b: rb.dropped,
    })
}

impl CcaResult {
    pub fn similarity(&self) -> f64 {
        self.correlations.iter().sum()
    }

    pub fn components_a(&self) -> Components {
        Components {
            mean: self.mean_a.clone(),
            directions: self.projection_a.clone(),
            values: self.correlations.clone(),
        }
    }

    pub fn components_b(&self) -> Components {
        Components {
            mean: self.mean_b.clone(),
            directions: self.projection_b.clone(),
            values: self.correlations.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("DENN-CCA\nversion=1\n");
        let idx = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "n_points={}", self.n_points).unwrap();
        writeln!(out, "correlations={}", join_f64(self.correlations.iter().copied())).unwrap();
        writeln!(out, "mean_a={}", join_f64(self.mean_a.iter().copied())).unwrap();
        writeln!(out, "mean_b={}", join_f64(self.mean_b.iter().copied())).unwrap();
        writeln!(out, "dropped_a={}", idx(&self.dropped_a)).unwrap();
        writeln!(out, "dropped_b={}", idx(&self.dropped_b)).unwrap();
        for (name, m) in [("projection_a", &self.projection_a), ("projection_b", &self.projection_b)] {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.rows() {
                writeln!(out, "{}", join_f64(row.iter().copied())).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, SvccaError> {
        let mut cur = LineCursor::new(text);
        let malformed = |line: usize, message: String| SvccaError::Malformed { line, message };
        match cur.next_line() {
            Some((_, "DENN-CCA")) => {}
            Some((line, other)) => return Err(malformed(line, format!("expected `DENN-CCA`, found `{other}`"))),
            None => return Err(SvccaError::MissingSection("DENN-CCA".into())),
        }
        let mut next_kv = |key: &str| -> Result<(usize, String), SvccaError> {
            let (line, content) = cur.next_line().ok_or_else(|| SvccaError::MissingSection(key.into()))?;
            match split_key_value(content) {
                Some((k, v)) if k == key => Ok((line, v.to_string())),
                _ => Err(malformed(line, format!("expected `{key}=...`, found `{content}`"))),
            }
        };
        let (line, version) = next_kv("version")?;
        if version != "1" {
            return Err(malformed(line, format!("unsupported version `{version}`")));
        }
        let (line, n) = next_kv("n_points")?;
        let n_points: usize = n.parse().map_err(|_| malformed(line, format!("invalid n_points `{n}`")))?;
        let mut floats = |key: &str| -> Result<Vec<f64>, SvccaError> {
            let (line, v) = next_kv(key)?;
            parse_f64_list(&v).map_err(|m| malformed(line, m))
        };
        let correlations = floats("correlations")?;
        let mean_a = floats("mean_a")?;
        let mean_b = floats("mean_b")?;
        let mut indices = |key: &str| -> Result<Vec<usize>, SvccaError> {
            let (line, v) = next_kv(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|t| t.trim().parse().map_err(|_| malformed(line, format!("invalid index `{t}`"))))
                .collect()
        };
        let dropped_a = indices("dropped_a")?;
        let dropped_b = indices("dropped_b")?;
        let mut matrix = |name: &str| -> Result<Array2<f64>, SvccaError> {
            let (line, header) = cur.next_line().ok_or_else(|| SvccaError::MissingSection(name.into()))?;
            let dims: Vec<&str> = header.split_whitespace().collect();
            let (rows, cols) = match dims.as_slice() {
                [h, r, c] if *h == name => match (r.parse::<usize>(), c.parse::<usize>()) {
                    (Ok(r), Ok(c)) => (r, c),
                    _ => return Err(malformed(line, format!("invalid dimensions in `{header}`"))),
                },
                _ => return Err(malformed(line, format!("expected `{name} <rows> <cols>`, found `{header}`"))),
            };
            let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 20));
            for _ in 0..rows {
                let (line, row) = cur.next_line().ok_or_else(|| SvccaError::MissingSection(format!("{name} row")))?;
                let values = parse_f64_list(row).map_err(|m| malformed(line, m))?;
                if values.len() != cols {
                    return Err(malformed(line, format!("expected {cols} values, found {}", values.len())));
                }
                data.extend(values);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("row lengths checked"))
        };
        let projection_a = matrix("projection_a")?;
        let projection_b = matrix("projection_b")?;
        match cur.next_line() {
            Some((_, "end")) => {}
            Some((line, other)) => return Err(malformed(line, format!("expected `end`, found `{other}`"))),
            None => return Err(SvccaError::MissingSection("end".into())),
        }
        let k = correlations.len();
        if projection_a.ncols() != k || projection_b.ncols() != k {
            return Err(malformed(0, "projection columns disagree with correlation count".into()));
        }
        if projection_a.nrows() != mean_a.len() || projection_b.nrows() != mean_b.len() {
            return Err(malformed(0, "projection rows disagree with mean length".into()));
        }
        Ok(CcaResult {
            correlations,
            n_points,
            mean_a: Array1::from(mean_a),
            mean_b: Array1::from(mean_b),
            projection_a,
            projection_b,
            dropped_a,
            dropped_b,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), SvccaError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, SvccaError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Replaces a view by its leading singular directions capturing at least
/// `fraction` of the total variance.
fn truncate_to_variance(values: &Array2<f64>, fraction: f64) -> Result<Array2<f64>, SvccaError> {
    let r = reduce(values)?;
    let total: f64 = r.s.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    let mut k = r.s.len();
    for (i, s) in r.s.iter().enumerate() {
        acc += s * s;
        if acc >= fraction * total * (1.0 - 1e-12) {
            k = i + 1;
            break;
        }
    }
    Ok(Array2::from_shape_fn((values.nrows(), k), |(i, c)| r.u[(i, c)] * r.s[c]))
}

/// ρ = Σ canonical correlations, optionally after SVD reduction of each view
/// to the given retained-variance fraction.
pub fn svcca_similarity(a: &ActivationMatrix, b: &ActivationMatrix, threshold: Option<f64>) -> Result<f64, SvccaError> {
    if a.sample_id != b.sample_id || a.n_points() != b.n_points() {
        return Err(SvccaError::SampleMismatch(a.sample_id.clone(), b.sample_id.clone()));
    }
    match threshold {
        None => Ok(cca(a, b)?.similarity()),
        Some(t) if t > 0.0 && t <= 1.0 => {
            let ta = truncate_to_variance(&a.values, t)?;
            let tb = truncate_to_variance(&b.values, t)?;
            Ok(cca_values(&ta, &tb)?.similarity())
        }
        Some(t) => Err(SvccaError::InvalidThreshold(t)),
    }
}

/// Singular values of the centred matrix, descending.
pub fn centred_spectrum(values: &Array2<f64>) -> Result<Vec<f64>, SvccaError> {
    let mean = column_means(values);
    let centred = DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| values[[i, j]] - mean[j]);
    let s = centred.singular_values();
    let mut s: Vec<f64> = s.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Intrinsic dimensionality: ρ of a layer with itself. Directions below the
/// rank cutoff get no correlation, so this is the numerical rank of the
/// centred activations.
pub fn self_similarity(a: &ActivationMatrix) -> Result<f64, SvccaError> {
    self_similarity_values(&a.values)
}

pub fn self_similarity_values(values: &Array2<f64>) -> Result<f64, SvccaError> {
    Ok(cca_values(values, values)?.similarity())
}

/// Principal directions of the centred activations, with σₖ/σ₁ as values.
pub fn principal_components(a: &ActivationMatrix) -> Result<Components, SvccaError> {
    let r = reduce(&a.values)?;
    let mut directions = Array2::zeros((a.n_neurons(), r.s.len()));
    for (row, &col) in r.kept.iter().enumerate() {
        for c in 0..r.s.len() {
            directions[[col, c]] = r.v[(row, c)];
        }
    }
    let top = r.s[0];
    Ok(Components {
        mean: r.mean,
        directions,
        values: r.s.iter().map(|s| s / top).collect(),
    })
}

/// One component evaluated over a grid, with its correlation (or normalised
/// singular value).
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentField {
    pub field: GridField,
    pub value: f64,
}

/// Evaluates every component of `components` for layer `layer` of `net` over
/// an `n × n` grid on `domain`.
pub fn component_fields(
    net: &Mlp,
    layer: usize,
    components: &Components,
    domain: &Rect,
    n: usize,
) -> Result<Vec<ComponentField>, SvccaError> {
    if n < 2 {
        return Err(SvccaError::GridTooSmall(n));
    }
    let nodes = grid_nodes(n, n, domain);
    let acts = net.layer_activations(layer, &nodes)?;
    let variates = components.variates(&acts);
    components
        .values
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let field = GridField::new(n, n, *domain, variates.column(k).to_vec())?;
            Ok(ComponentField { field, value })
        })
        .collect()
}

/// Multiple correlation between a field and its least-squares fit
/// `a·x + b·y + c` over the grid nodes.
pub fn linear_fit_correlation(field: &GridField) -> Result<f64, SvccaError> {
    let nodes = field.nodes();
    let n = nodes.len();
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => nodes[i][0],
        1 => nodes[i][1],
        _ => 1.0,
    });
    let y = nalgebra::DVector::from_column_slice(field.values());
    let coeffs = design.clone().svd(true, true).solve(&y, 1e-12).map_err(|_| SvccaError::Svd)?;
    let fit = &design * coeffs;
    let mean_y = y.mean();
    let mean_f = fit.mean();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dy, df) = (y[i] - mean_y, fit[i] - mean_f);
        sxy += dy * df;
        sxx += df * df;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
