//! Independent reference checks. Each returns a [`Check`] so the same code can
//! back a plain assertion and a PASS/FAIL report line.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use denn_core::bvp::{fd_solve_source, PointTag, Rect, TaggedPointSet};
use denn_core::generality::{decompose, EnsembleIndex, SimilarityMatrix, XTenths};
use denn_core::net::{evaluate_loss, loss_param_gradient, uniform_widths};
use denn_core::svcca::cca_values;
use denn_core::{Activation, BvpSpec, LossNorm, Mlp};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Check { pass, detail }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal by Box–Muller.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

/// Glorot weights with non-zero random biases so every parameter matters.
pub fn random_net<R: Rng>(rng: &mut R, width: usize, depth: usize) -> Mlp {
    let mut net = Mlp::glorot_init(&uniform_widths(width, depth), rng).unwrap();
    let layers: Vec<_> = net
        .layers()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.bias = Array1::from_shape_simple_fn(l.bias.len(), || 0.5 * normal(rng));
            l
        })
        .collect();
    net = Mlp::from_layers(layers, Activation::Tanh).unwrap();
    net
}

fn random_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

/// `|a − b|` relative to `max(|b|, floor)`.
fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor).max(f64::MIN_POSITIVE)
}

/// Forward-mode input derivatives against central differences of the plain
/// forward pass, and parameter gradients against central differences of the
/// loss. Components are compared relative to `max(|fd|, 1e-2·max|fd|)` over
/// the quantity they belong to.
pub fn derivative_exactness(cases: usize) -> Check {
    let mut rng = rng(0xD1FF);
    let (mut worst_value, mut worst_grad, mut worst_lap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let width = [4, 8, 16][rng.random_range(0..3)];
        let depth = rng.random_range(1..=4);
        let net = random_net(&mut rng, width, depth);
        let p = random_point(&mut rng);
        let b = net.forward_with_input_derivatives(p).unwrap();
        let u = |q: [f64; 2]| net.value(q).unwrap();
        worst_value = worst_value.max(rel(b.value, u(p), 1e-12));

        let h = 1e-5;
        let gx = (u([p[0] + h, p[1]]) - u([p[0] - h, p[1]])) / (2.0 * h);
        let gy = (u([p[0], p[1] + h]) - u([p[0], p[1] - h])) / (2.0 * h);
        let gfloor = 1e-2 * gx.abs().max(gy.abs());
        worst_grad = worst_grad.max(rel(b.input_gradient[0], gx, gfloor)).max(rel(b.input_gradient[1], gy, gfloor));

        let c = u(p);
        let second = |h: f64, axis: usize| {
            let mut hi = p;
            let mut lo = p;
            hi[axis] += h;
            lo[axis] -= h;
            (u(hi) - 2.0 * c + u(lo)) / (h * h)
        };
        // Richardson extrapolation of two second differences.
        let richardson = |axis| (4.0 * second(5e-3, axis) - second(1e-2, axis)) / 3.0;
        let (uxx, uyy) = (richardson(0), richardson(1));
        let lfloor = 1e-2 * uxx.abs().max(uyy.abs());
        worst_lap = worst_lap
            .max(rel(b.input_pure_second[0], uxx, lfloor))
            .max(rel(b.input_pure_second[1], uyy, lfloor))
            .max(rel(b.laplacian(), uxx + uyy, lfloor));
    }

    let mut worst_param = 0.0f64;
    for _ in 0..cases {
        let width = [2, 4, 8][rng.random_range(0..3)];
        let depth = rng.random_range(1..=4);
        let mut net = random_net(&mut rng, width, depth);
        let spec = BvpSpec::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.3..0.3),
            rng.random_range(0.15..0.5),
            rng.random_range(0.5..2.0),
            Rect::UNIT_SQUARE,
        )
        .unwrap();
        let mut points = Vec::new();
        let mut tags = Vec::new();
        for _ in 0..3 {
            points.push(random_point(&mut rng));
            tags.push(PointTag::Interior);
        }
        for k in 0..3 {
            let t = rng.random_range(-1.0..1.0);
            points.push(match k {
                0 => [t, -1.0],
                1 => [1.0, t],
                _ => [-1.0, t],
            });
            tags.push(PointTag::Boundary);
        }
        let batch = TaggedPointSet::from_parts(points, tags).unwrap();
        let (_, grad) = loss_param_gradient(&net, &batch, &spec, LossNorm::L2).unwrap();
        let mut fd = Vec::new();
        let mut exact = Vec::new();
        for li in 0..grad.layers.len() {
            let (rows, cols) = grad.layers[li].weights.dim();
            for idx in 0..rows * cols + rows {
                let original = param(&net, li, idx);
                let h = 1e-6 * original.abs().max(1.0);
                set_param(&mut net, li, idx, original + h);
                let up = evaluate_loss(&net, &batch, &spec, LossNorm::L2).unwrap();
                set_param(&mut net, li, idx, original - h);
                let down = evaluate_loss(&net, &batch, &spec, LossNorm::L2).unwrap();
                set_param(&mut net, li, idx, original);
                fd.push((up - down) / (2.0 * h));
                exact.push(if idx < rows * cols {
                    grad.layers[li].weights[[idx / cols, idx % cols]]
                } else {
                    grad.layers[li].bias[idx - rows * cols]
                });
            }
        }
        let floor = 1e-2 * fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in exact.iter().zip(&fd) {
            worst_param = worst_param.max(rel(*a, *b, floor));
        }
    }
    let pass = worst_value <= 1e-5 && worst_grad <= 1e-5 && worst_lap <= 1e-4 && worst_param <= 1e-4;
    Check::new(
        pass,
        format!(
            "{cases}+{cases} cases; worst relative error: value {worst_value:.1e}, gradient {worst_grad:.1e} (tol 1e-5), \
             laplacian {worst_lap:.1e}, parameter gradient {worst_param:.1e} (tol 1e-4)"
        ),
    )
}

fn param(net: &Mlp, layer: usize, idx: usize) -> f64 {
    let l = &net.layers()[layer];
    let (rows, cols) = l.weights.dim();
    if idx < rows * cols {
        l.weights[[idx / cols, idx % cols]]
    } else {
        l.bias[idx - rows * cols]
    }
}

fn set_param(net: &mut Mlp, layer: usize, idx: usize, value: f64) {
    let mut l = net.layers()[layer].clone();
    let (rows, cols) = l.weights.dim();
    if idx < rows * cols {
        l.weights[[idx / cols, idx % cols]] = value;
    } else {
        l.bias[idx - rows * cols] = value;
    }
    net.set_layer(layer, l).unwrap();
}

/// `u = (1−x²)(1−y²)·exp(x + y/2)` vanishes on the boundary of the square.
pub fn manufactured_u(p: [f64; 2]) -> f64 {
    let [x, y] = p;
    (1.0 - x * x) * (1.0 - y * y) * (x + 0.5 * y).exp()
}

pub fn manufactured_laplacian(p: [f64; 2]) -> f64 {
    let [x, y] = p;
    let f = (1.0 - x * x) * x.exp();
    let g = (1.0 - y * y) * (0.5 * y).exp();
    let fxx = x.exp() * ((1.0 - x * x) - 4.0 * x - 2.0);
    let gyy = (0.5 * y).exp() * ((1.0 - y * y) / 4.0 - 2.0 * y - 2.0);
    fxx * g + f * gyy
}

/// Max nodal error of the solver against the manufactured solution for each
/// grid size, and the ratio between successive sizes.
pub fn fd_convergence() -> Check {
    let sizes = [33, 65, 129];
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let field = fd_solve_source(&Rect::UNIT_SQUARE, n, manufactured_laplacian).unwrap();
            field
                .nodes()
                .iter()
                .zip(field.values())
                .map(|(&p, &v)| (v - manufactured_u(p)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = ratios.iter().all(|r| (3.5..=4.5).contains(r));
    Check::new(
        pass,
        format!(
            "max errors {:.3e} / {:.3e} / {:.3e} at n = 33/65/129; ratios {:.3}, {:.3} (want 3.5..4.5)",
            errors[0], errors[1], errors[2], ratios[0], ratios[1]
        ),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random invertible map: a Gaussian matrix plus a multiple of the identity.
fn invertible<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    gaussian_matrix(rng, n, n) + Array2::<f64>::eye(n) * 3.0
}

fn affine<R: Rng>(rng: &mut R, a: &Array2<f64>) -> Array2<f64> {
    let m = invertible(rng, a.ncols());
    let shift = Array1::from_shape_simple_fn(a.ncols(), || 5.0 * normal(rng));
    a.dot(&m) + &shift
}

pub fn cca_properties(trials: usize) -> Check {
    let mut rng = rng(0xCCA);
    let a = gaussian_matrix(&mut rng, 2000, 10);
    let ident = cca_values(&a, &a).unwrap().correlations;
    let identity_err = if ident.len() == 10 { ident.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max) } else { f64::INFINITY };

    let mix = gaussian_matrix(&mut rng, 10, 8);
    let b = a.dot(&mix) + gaussian_matrix(&mut rng, 2000, 8) * 2.0;
    let base = cca_values(&a, &b).unwrap().correlations;
    let full = cca_values(&affine(&mut rng, &a), &affine(&mut rng, &b)).unwrap().correlations;
    let scales = Array1::from_shape_simple_fn(10, || rng.random_range(0.1..10.0) * if rng.random() { 1.0 } else { -1.0 });
    let per_neuron = cca_values(&(&a * &scales + 7.0), &b).unwrap().correlations;
    let affine_err = max_diff(&base, &full).max(max_diff(&base, &per_neuron));

    let swapped = cca_values(&b, &a).unwrap().correlations;
    let symmetry_err = max_diff(&base, &swapped);

    let mut worst_independent = 0.0f64;
    for _ in 0..trials {
        let x = gaussian_matrix(&mut rng, 10_000, 10);
        let y = gaussian_matrix(&mut rng, 10_000, 10);
        let c = cca_values(&x, &y).unwrap().correlations;
        worst_independent = worst_independent.max(c.iter().copied().fold(0.0, f64::max));
    }
    let pass = identity_err <= 1e-10 && affine_err <= 1e-6 && worst_independent < 0.2 && symmetry_err <= 1e-8;
    Check::new(
        pass,
        format!(
            "identity {identity_err:.1e} (tol 1e-10), affine {affine_err:.1e} (tol 1e-6), \
             independent max {worst_independent:.3} over {trials} trials (< 0.2), symmetry {symmetry_err:.1e} (tol 1e-8)"
        ),
    )
}

/// Counts `(self, same, cross by Δ)` by visiting every upper-triangle pair.
pub fn enumerate_groups(index: &EnsembleIndex) -> (usize, usize, BTreeMap<i64, usize>) {
    let (mut own, mut same, mut cross) = (0, 0, BTreeMap::new());
    let m = &index.members;
    for i in 0..m.len() {
        for j in i..m.len() {
            if i == j {
                own += 1;
            } else if m[i].x == m[j].x {
                same += 1;
            } else {
                *cross.entry((m[i].x.0 - m[j].x.0).abs()).or_insert(0) += 1;
            }
        }
    }
    (own, same, cross)
}

pub fn closed_form_groups(p: usize, s: usize) -> (usize, usize, BTreeMap<i64, usize>) {
    let cross = (1..p).map(|d| (d as i64, (p - d) * s * s)).collect();
    (p * s, p * s * (s - 1) / 2, cross)
}

pub fn decomposition_counts() -> Check {
    let mut failures = Vec::new();
    for p in 1..=5usize {
        for s in 1..=5usize {
            let positions: Vec<XTenths> = (0..p as i64).map(XTenths).collect();
            let index = EnsembleIndex::grid(&positions, s as u64, uniform_widths(4, 2)).unwrap();
            let n = index.len();
            let values = Array2::from_shape_fn((n, n), |(i, j)| 1.0 + ((i * j + i + j) % 7) as f64 / 10.0);
            let values = (&values + &values.t()) / 2.0;
            let stats = decompose(&SimilarityMatrix { layer: 1, index: index.clone(), values }).unwrap();
            let got = (
                stats.self_sim.count,
                stats.same.map_or(0, |g| g.count),
                stats.cross.iter().map(|(&d, g)| (d, g.count)).collect::<BTreeMap<_, _>>(),
            );
            let enumerated = enumerate_groups(&index);
            let closed = closed_form_groups(p, s);
            if got != closed || enumerated != closed {
                failures.push(format!("P={p} S={s}"));
            }
        }
    }
    Check::new(
        failures.is_empty(),
        if failures.is_empty() {
            "all 25 (P, S) pairs match enumeration and closed form".into()
        } else {
            format!("mismatch at {}", failures.join(", "))
        },
    )
}
