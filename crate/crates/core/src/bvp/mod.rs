//! The Poisson family `∇²u = s` on a rectangle with `u = 0` on the boundary,
//! where `−s` is a Gaussian nascent delta of width `r` centred at `(x', y')`.

mod fd;
mod grid;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

pub use fd::{fd_solve, fd_solve_source, relative_l2_error, stencil_residual};
pub use grid::{GridField, PgmImage, PgmScale};
pub(crate) use grid::grid_nodes;

use crate::net::DerivativeBundle;

#[derive(Debug, Error)]
pub enum BvpError {
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("grid resolution {0} too small (need at least {1})")]
    GridTooSmall(usize, usize),
    #[error("solver stopped after {iterations} iterations with residual {residual:e} (target {target:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        target: f64,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("point tags do not match points ({points} points, {tags} tags)")]
    TagCount { points: usize, tags: usize },
    #[error("point {index} ({x}, {y}) is tagged {tag} but does not lie {where_}")]
    Misplaced {
        index: usize,
        x: f64,
        y: f64,
        tag: PointTag,
        where_: &'static str,
    },
    #[error("network evaluation failed: {0}")]
    Net(#[from] crate::net::NetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Default for Rect {
    fn default() -> Self {
        Rect::UNIT_SQUARE
    }
}

impl Rect {
    /// `[−1, 1]²`.
    pub const UNIT_SQUARE: Rect = Rect {
        x0: -1.0,
        x1: 1.0,
        y0: -1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self, BvpError> {
        let r = Rect { x0, x1, y0, y1 };
        if ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) || x0 >= x1 || y0 >= y1 {
            return Err(BvpError::InvalidSpec(format!("degenerate domain {r:?}")));
        }
        Ok(r)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }

    /// On the boundary: inside the closed rectangle with one coordinate
    /// exactly equal to a bound.
    pub fn on_boundary(&self, p: [f64; 2]) -> bool {
        self.contains_closed(p) && (p[0] == self.x0 || p[0] == self.x1 || p[1] == self.y0 || p[1] == self.y1)
    }
}

/// One member of the task family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvpSpec {
    /// Source centre `x'`.
    pub x_source: f64,
    /// Source centre `y'`.
    pub y_source: f64,
    /// Source width `r`.
    pub r: f64,
    /// Boundary-term weight `η`.
    pub eta: f64,
    pub domain: Rect,
}

impl Default for BvpSpec {
    fn default() -> Self {
        BvpSpec {
            x_source: 0.0,
            y_source: 0.0,
            r: 0.1,
            eta: 1.0,
            domain: Rect::UNIT_SQUARE,
        }
    }
}

impl BvpSpec {
    pub fn new(x_source: f64, y_source: f64, r: f64, eta: f64, domain: Rect) -> Result<Self, BvpError> {
        let spec = BvpSpec {
            x_source,
            y_source,
            r,
            eta,
            domain,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default problem with the source moved to `x'`.
    pub fn with_x_source(x_source: f64) -> Result<Self, BvpError> {
        let spec = BvpSpec {
            x_source,
            ..BvpSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BvpError> {
        Rect::new(self.domain.x0, self.domain.x1, self.domain.y0, self.domain.y1)?;
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(BvpError::InvalidSpec(format!("source width r = {} must be positive", self.r)));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(BvpError::InvalidSpec(format!("boundary weight eta = {} must be >= 0", self.eta)));
        }
        if !self.domain.contains_closed([self.x_source, self.y_source]) {
            return Err(BvpError::InvalidSpec(format!(
                "source centre ({}, {}) lies outside the domain",
                self.x_source, self.y_source
            )));
        }
        Ok(())
    }

    /// `s(x, y) = −exp(−((x−x')² + (y−y')²) / (2r²)) / (2πr²)`.
    pub fn source_term(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.x_source;
        let dy = p[1] - self.y_source;
        let r2 = self.r * self.r;
        -(-(dx * dx + dy * dy) / (2.0 * r2)).exp() / (2.0 * PI * r2)
    }
}

pub fn source_term(p: [f64; 2], spec: &BvpSpec) -> f64 {
    spec.source_term(p)
}

/// Norm applied to pointwise residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossNorm {
    L1,
    #[default]
    L2,
}

impl LossNorm {
    /// `|r|` or `r²`.
    pub fn penalty(self, r: f64) -> f64 {
        match self {
            LossNorm::L1 => r.abs(),
            LossNorm::L2 => r * r,
        }
    }

    /// Derivative of [`LossNorm::penalty`]; the L1 subgradient at 0 is 0.
    pub fn penalty_slope(self, r: f64) -> f64 {
        match self {
            LossNorm::L1 => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossNorm::L2 => 2.0 * r,
        }
    }
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossNorm::L1 => "l1",
            LossNorm::L2 => "l2",
        })
    }
}

impl FromStr for LossNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(LossNorm::L1),
            "l2" => Ok(LossNorm::L2),
            other => Err(format!("unknown loss norm `{other}` (expected l1 or l2)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointTag {
    Interior,
    Boundary,
}

impl fmt::Display for PointTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointTag::Interior => "interior",
            PointTag::Boundary => "boundary",
        })
    }
}

/// Loss contribution of a single point: `|∇²u − s|^k` inside, `η |u|^k` on
/// the boundary. Only one of the two terms is ever non-zero.
pub fn pointwise_loss(bundle: &DerivativeBundle, p: [f64; 2], tag: PointTag, spec: &BvpSpec, norm: LossNorm) -> f64 {
    match tag {
        PointTag::Interior => norm.penalty(bundle.laplacian() - spec.source_term(p)),
        PointTag::Boundary => spec.eta * norm.penalty(bundle.value),
    }
}

/// Collocation points with interior/boundary tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaggedPointSet {
    points: Vec<[f64; 2]>,
    tags: Vec<PointTag>,
}

impl TaggedPointSet {
    pub fn from_parts(points: Vec<[f64; 2]>, tags: Vec<PointTag>) -> Result<Self, BvpError> {
        if points.len() != tags.len() {
            return Err(BvpError::TagCount {
                points: points.len(),
                tags: tags.len(),
            });
        }
        Ok(TaggedPointSet { points, tags })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn tags(&self) -> &[PointTag] {
        &self.tags
    }

    pub fn count(&self, tag: PointTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], PointTag)> + '_ {
        self.points.iter().copied().zip(self.tags.iter().copied())
    }

    pub fn points_tagged(&self, tag: PointTag) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.iter().filter(move |&(_, t)| t == tag).map(|(p, _)| p)
    }

    /// Interior points strictly inside `domain`, boundary points exactly on it.
    pub fn validate(&self, domain: &Rect) -> Result<(), BvpError> {
        for (index, (p, tag)) in self.iter().enumerate() {
            let ok = match tag {
                PointTag::Interior => domain.contains_open(p),
                PointTag::Boundary => domain.on_boundary(p),
            };
            if !ok {
                return Err(BvpError::Misplaced {
                    index,
                    x: p[0],
                    y: p[1],
                    tag,
                    where_: match tag {
                        PointTag::Interior => "strictly inside the domain",
                        PointTag::Boundary => "on the domain boundary",
                    },
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, p: [f64; 2], tag: PointTag) {
        self.points.push(p);
        self.tags.push(tag);
    }
}

/// Uniform draw from the open interval `(0, 1)`.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Uniform draw from `[0, 1)`.
fn half_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random()
}

/// `n_interior` uniform points in the open domain followed by `n_per_edge`
/// uniform points on each edge. Edges cover half-open segments running
/// counter-clockwise (bottom, right, top, left), so each corner belongs to
/// exactly one edge.
pub fn sample_training_set<R: Rng + ?Sized>(rng: &mut R, spec: &BvpSpec, n_interior: usize, n_per_edge: usize) -> TaggedPointSet {
    let d = spec.domain;
    let mut set = TaggedPointSet {
        points: Vec::with_capacity(n_interior + 4 * n_per_edge),
        tags: Vec::with_capacity(n_interior + 4 * n_per_edge),
    };
    while set.len() < n_interior {
        let p = [d.x0 + d.width() * open_unit(rng), d.y0 + d.height() * open_unit(rng)];
        if d.contains_open(p) {
            set.push(p, PointTag::Interior);
        }
    }
    for _ in 0..n_per_edge {
        set.push([d.x0 + d.width() * half_open(rng), d.y0], PointTag::Boundary);
    }
    for _ in 0..n_per_edge {
        set.push([d.x1, d.y0 + d.height() * half_open(rng)], PointTag::Boundary);
    }
    for _ in 0..n_per_edge {
        set.push([d.x1 - d.width() * half_open(rng), d.y1], PointTag::Boundary);
    }
    for _ in 0..n_per_edge {
        set.push([d.x0, d.y1 - d.height() * half_open(rng)], PointTag::Boundary);
    }
    set
}

/// Same construction as [`sample_training_set`] with both counts multiplied
/// by `scale`.
pub fn sample_test_set<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &BvpSpec,
    n_interior: usize,
    n_per_edge: usize,
    scale: usize,
) -> TaggedPointSet {
    sample_training_set(rng, spec, n_interior * scale, n_per_edge * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn source_peak_value() {
        let spec = BvpSpec::with_x_source(0.3).unwrap();
        let peak = spec.source_term([0.3, 0.0]);
        assert!((peak + 1.0 / (2.0 * PI * 0.01)).abs() < 1e-12);
        assert!((peak + 15.91549).abs() < 1e-5);
    }

    #[test]
    fn source_is_radially_symmetric_and_negative() {
        let spec = BvpSpec::with_x_source(0.4).unwrap();
        for d in [0.0, 0.05, 0.17, 0.6] {
            let (a, b) = (spec.source_term([0.4 + d, 0.0]), spec.source_term([0.4 - d, 0.0]));
            assert!((a - b).abs() <= 1e-14 * a.abs(), "{a} {b}");
            assert!(spec.source_term([0.4 + d, 0.3]) < 0.0);
        }
    }

    #[test]
    fn source_far_corner_value() {
        // −15.91549·exp(−178) evaluated independently.
        let spec = BvpSpec::with_x_source(0.6).unwrap();
        let v = spec.source_term([-1.0, -1.0]);
        let expected = -(1.0 / (2.0 * PI * 0.01)) * (-(2.56f64 + 1.0) / 0.02).exp();
        assert!((v / expected - 1.0).abs() < 1e-12);
        assert!((v / -7.895910832828528e-77 - 1.0).abs() < 1e-6, "{v:e}");
    }

    #[test]
    fn spec_validation() {
        assert!(BvpSpec::with_x_source(1.5).is_err());
        assert!(BvpSpec::new(0.0, 0.0, 0.0, 1.0, Rect::UNIT_SQUARE).is_err());
        assert!(BvpSpec::new(0.0, 0.0, 0.1, -1.0, Rect::UNIT_SQUARE).is_err());
        assert!(Rect::new(1.0, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn pointwise_loss_cases() {
        let spec = BvpSpec::with_x_source(0.2).unwrap();
        let zero = DerivativeBundle {
            value: 0.0,
            input_gradient: [0.0; 2],
            input_pure_second: [0.0; 2],
        };
        assert_eq!(pointwise_loss(&zero, [1.0, 0.1], PointTag::Boundary, &spec, LossNorm::L2), 0.0);
        let centre = pointwise_loss(&zero, [0.2, 0.0], PointTag::Interior, &spec, LossNorm::L2);
        assert!((centre - 253.30).abs() < 0.01, "{centre}");
        let u_nonzero = DerivativeBundle { value: 3.0, ..zero };
        let no_weight = BvpSpec { eta: 0.0, ..spec };
        assert_eq!(pointwise_loss(&u_nonzero, [1.0, 0.1], PointTag::Boundary, &no_weight, LossNorm::L1), 0.0);
        assert_eq!(pointwise_loss(&u_nonzero, [1.0, 0.1], PointTag::Boundary, &spec, LossNorm::L1), 3.0);
        assert_eq!(pointwise_loss(&u_nonzero, [1.0, 0.1], PointTag::Boundary, &spec, LossNorm::L2), 9.0);
    }

    #[test]
    fn sampler_counts_and_placement() {
        let spec = BvpSpec::default();
        let set = sample_training_set(&mut ChaCha8Rng::seed_from_u64(1), &spec, 10_000, 10_000);
        assert_eq!(set.len(), 50_000);
        assert_eq!(set.count(PointTag::Boundary), 40_000);
        set.validate(&spec.domain).unwrap();
        for p in set.points_tagged(PointTag::Boundary) {
            assert!(p[0].abs() == 1.0 || p[1].abs() == 1.0);
        }
        let only_edges = sample_training_set(&mut ChaCha8Rng::seed_from_u64(1), &spec, 0, 7);
        assert_eq!(only_edges.count(PointTag::Boundary), 28);
        assert_eq!(only_edges.count(PointTag::Interior), 0);
    }

    #[test]
    fn test_set_scales_counts() {
        let spec = BvpSpec::default();
        let set = sample_test_set(&mut ChaCha8Rng::seed_from_u64(2), &spec, 100, 100, 10);
        assert_eq!(set.len(), 5_000);
        assert_eq!(set.count(PointTag::Interior), 1_000);
    }

    #[test]
    fn sampler_is_deterministic() {
        let spec = BvpSpec::default();
        let a = sample_training_set(&mut ChaCha8Rng::seed_from_u64(5), &spec, 50, 10);
        let b = sample_training_set(&mut ChaCha8Rng::seed_from_u64(5), &spec, 50, 10);
        assert_eq!(a, b);
    }

    #[test]
    fn misplaced_points_are_reported() {
        let set = TaggedPointSet::from_parts(vec![[0.5, 0.5]], vec![PointTag::Boundary]).unwrap();
        assert!(matches!(set.validate(&Rect::UNIT_SQUARE), Err(BvpError::Misplaced { .. })));
        assert!(TaggedPointSet::from_parts(vec![[0.0, 0.0]], vec![]).is_err());
    }
}
