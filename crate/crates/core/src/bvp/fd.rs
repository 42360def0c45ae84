//! Five-point finite-difference reference solver for `∇²u = s`, `u = 0` on
//! the boundary, solved with conjugate gradients.

use super::grid::GridField;
use super::{BvpError, BvpSpec, Rect};
use crate::net::Mlp;

/// Stencil residual tolerance, relative to `max(1, max|s|)`.
const RESIDUAL_TOL: f64 = 1e-10;

/// Solves the problem for `spec` on an `n × n` node grid.
pub fn fd_solve(spec: &BvpSpec, n: usize) -> Result<GridField, BvpError> {
    spec.validate()?;
    fd_solve_source(&spec.domain, n, |p| spec.source_term(p))
}

struct Stencil {
    nx: usize,
    ny: usize,
    cx: f64,
    cy: f64,
}

impl Stencil {
    /// `(−∇²_h v)` over the interior unknowns, zero Dirichlet data outside.
    fn apply_neg(&self, v: &[f64], out: &mut [f64]) {
        let (mx, my) = (self.nx - 2, self.ny - 2);
        for j in 0..my {
            for i in 0..mx {
                let k = j * mx + i;
                let c = v[k];
                let w = if i > 0 { v[k - 1] } else { 0.0 };
                let e = if i + 1 < mx { v[k + 1] } else { 0.0 };
                let s = if j > 0 { v[k - mx] } else { 0.0 };
                let n = if j + 1 < my { v[k + mx] } else { 0.0 };
                out[k] = self.cx * (2.0 * c - w - e) + self.cy * (2.0 * c - s - n);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Solves with an arbitrary source on an `n × n` node grid over `domain`.
pub fn fd_solve_source(domain: &Rect, n: usize, source: impl Fn([f64; 2]) -> f64) -> Result<GridField, BvpError> {
    if n < 3 {
        return Err(BvpError::GridTooSmall(n, 3));
    }
    let domain = Rect::new(domain.x0, domain.x1, domain.y0, domain.y1)?;
    let rhs_field = GridField::from_fn(n, n, domain, &source)?;
    let hx = domain.width() / (n - 1) as f64;
    let hy = domain.height() / (n - 1) as f64;
    let stencil = Stencil {
        nx: n,
        ny: n,
        cx: 1.0 / (hx * hx),
        cy: 1.0 / (hy * hy),
    };
    let m = n - 2;
    // −∇²u = −s
    let b: Vec<f64> = (0..m * m)
        .map(|k| -rhs_field.get(k % m + 1, k / m + 1))
        .collect();
    let target = RESIDUAL_TOL * max_abs(&b).max(1.0);

    let mut x = vec![0.0; m * m];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; m * m];
    let mut rr = dot(&r, &r);
    let max_iter = 50 * n + 1000;
    let mut iterations = 0;
    // Restart from the true residual whenever the recursive one says we are
    // done; stop once the true residual meets the target.
    let mut restarts = 0;
    loop {
        if max_abs(&r) <= 0.1 * target || rr == 0.0 {
            stencil.apply_neg(&x, &mut ap);
            for k in 0..r.len() {
                r[k] = b[k] - ap[k];
            }
            if max_abs(&r) <= target || restarts >= 5 {
                break;
            }
            restarts += 1;
            p.copy_from_slice(&r);
            rr = dot(&r, &r);
        }
        if iterations >= max_iter {
            break;
        }
        stencil.apply_neg(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for k in 0..x.len() {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..p.len() {
            p[k] = r[k] + beta * p[k];
        }
        iterations += 1;
    }

    let mut values = vec![0.0; n * n];
    for j in 0..m {
        for i in 0..m {
            values[(j + 1) * n + i + 1] = x[j * m + i];
        }
    }
    let field = GridField::new(n, n, domain, values)?;
    let residual = stencil_residual(&field, &source);
    if residual > target {
        return Err(BvpError::NoConvergence {
            iterations,
            residual,
            target,
        });
    }
    Ok(field)
}

/// Largest `|∇²_h u − s|` over the interior nodes of `field`.
pub fn stencil_residual(field: &GridField, source: impl Fn([f64; 2]) -> f64) -> f64 {
    let (nx, ny) = (field.nx(), field.ny());
    let d = field.domain();
    let hx = d.width() / (nx - 1) as f64;
    let hy = d.height() / (ny - 1) as f64;
    let mut worst = 0.0f64;
    for j in 1..ny.saturating_sub(1) {
        for i in 1..nx.saturating_sub(1) {
            let c = field.get(i, j);
            let lap = (field.get(i + 1, j) - 2.0 * c + field.get(i - 1, j)) / (hx * hx)
                + (field.get(i, j + 1) - 2.0 * c + field.get(i, j - 1)) / (hy * hy);
            worst = worst.max((lap - source(field.node(i, j))).abs());
        }
    }
    worst
}

/// `‖u_net − u_ref‖₂ / ‖u_ref‖₂` over the nodes of `oracle`.
pub fn relative_l2_error(net: &Mlp, oracle: &GridField) -> Result<f64, BvpError> {
    let predicted = net.values(&oracle.nodes())?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&u, &v) in predicted.iter().zip(oracle.values()) {
        num += (u - v) * (u - v);
        den += v * v;
    }
    if den == 0.0 {
        return Err(BvpError::InvalidSpec("reference field is identically zero".into()));
    }
    Ok((num / den).sqrt())
}
