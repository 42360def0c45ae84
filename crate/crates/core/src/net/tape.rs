//! Layerwise propagation of values and input derivatives, and the reverse
//! sweep over a recorded forward pass.
//!
//! Channels are stored feature-major (`width × batch`). For a hidden layer
//! with `z = W a + b`, `h = tanh(z)` and input coordinate `k`:
//!
//! ```text
//! a   = h(z)
//! a_k = h'(z) ⊙ (W a_k,prev)
//! a_kk = h''(z) ⊙ (W a_k,prev)² + h'(z) ⊙ (W a_kk,prev)
//! ```
//!
//! The readout layer is the identity, so its channels are the pre-activations.

use ndarray::{Array2, Axis, Zip};

use super::{Dense, Mlp, ParamGradient};

/// First input derivatives (`grad`) and pure second derivatives (`second`)
/// for each of the two input coordinates.
#[derive(Clone, Debug)]
pub(crate) struct Derivs {
    pub grad: [Array2<f64>; 2],
    pub second: [Array2<f64>; 2],
}

#[derive(Clone, Debug)]
pub(crate) struct Channels {
    pub val: Array2<f64>,
    pub deriv: Option<Derivs>,
}

impl Channels {
    pub fn values_of(points: &[[f64; 2]]) -> Self {
        let val = Array2::from_shape_fn((2, points.len()), |(i, j)| points[j][i]);
        Channels { val, deriv: None }
    }

    pub fn with_input_derivatives(points: &[[f64; 2]]) -> Self {
        let n = points.len();
        let mut base = Self::values_of(points);
        let unit = |k: usize| Array2::from_shape_fn((2, n), |(i, _)| if i == k { 1.0 } else { 0.0 });
        base.deriv = Some(Derivs {
            grad: [unit(0), unit(1)],
            second: [Array2::zeros((2, n)), Array2::zeros((2, n))],
        });
        base
    }
}

/// What the reverse sweep needs from one layer's forward pass.
struct LayerRecord {
    /// `h'(z)`, hidden layers only.
    d1: Option<Array2<f64>>,
    /// `W a_k,prev` and `W a_kk,prev`.
    pre_grad: Option<[Array2<f64>; 2]>,
    pre_second: Option<[Array2<f64>; 2]>,
}

fn affine(layer: &Dense, input: &Array2<f64>) -> Array2<f64> {
    let mut z = layer.weights.dot(input);
    z += &layer.bias.view().insert_axis(Axis(1));
    z
}

fn forward_one(net: &Mlp, index: usize, input: &Channels, record: bool) -> (Channels, Option<LayerRecord>) {
    let layer = &net.layers[index];
    let hidden = index + 1 < net.layers.len();
    let z = affine(layer, &input.val);
    let pre = input.deriv.as_ref().map(|d| {
        (
            [layer.weights.dot(&d.grad[0]), layer.weights.dot(&d.grad[1])],
            [layer.weights.dot(&d.second[0]), layer.weights.dot(&d.second[1])],
        )
    });

    if !hidden {
        let out = Channels {
            val: z,
            deriv: pre.as_ref().map(|(g, s)| Derivs {
                grad: g.clone(),
                second: s.clone(),
            }),
        };
        let rec = record.then(|| LayerRecord {
            d1: None,
            pre_grad: None,
            pre_second: None,
        });
        return (out, rec);
    }

    let h = z.mapv(super::math::tanh);
    let d1 = h.mapv(|t| 1.0 - t * t);
    let deriv = pre.as_ref().map(|(zg, zs)| {
        let mut grad = [Array2::zeros(h.raw_dim()), Array2::zeros(h.raw_dim())];
        let mut second = [Array2::zeros(h.raw_dim()), Array2::zeros(h.raw_dim())];
        for k in 0..2 {
            Zip::from(&mut grad[k])
                .and(&mut second[k])
                .and(&h)
                .and(&d1)
                .and(&zg[k])
                .and(&zs[k])
                .for_each(|g, s, &h, &d1, &zg, &zs| {
                    let d2 = -2.0 * h * d1;
                    *g = d1 * zg;
                    *s = d2 * zg * zg + d1 * zs;
                });
        }
        Derivs { grad, second }
    });
    let rec = record.then(|| {
        let (pg, ps) = match pre {
            Some((g, s)) => (Some(g), Some(s)),
            None => (None, None),
        };
        LayerRecord {
            d1: Some(d1),
            pre_grad: pg,
            pre_second: ps,
        }
    });
    (Channels { val: h, deriv }, rec)
}

/// Propagates one layer without recording.
pub(crate) fn layer_forward(net: &Mlp, index: usize, input: &Channels) -> Channels {
    forward_one(net, index, input, false).0
}

/// A forward pass over layers `from..` kept for the reverse sweep.
pub(crate) struct Tape<'a> {
    net: &'a Mlp,
    from: usize,
    input: &'a Channels,
    /// `outputs[k]` is the output of layer `from + k`.
    outputs: Vec<Channels>,
    records: Vec<LayerRecord>,
}

/// Adjoints of the loss with respect to one set of channels.
pub(crate) struct Adjoint {
    pub val: Array2<f64>,
    pub grad: Option<[Array2<f64>; 2]>,
    pub second: Option<[Array2<f64>; 2]>,
}

impl<'a> Tape<'a> {
    pub fn record(net: &'a Mlp, input: &'a Channels, from: usize) -> Self {
        let n_layers = net.layers.len() - from;
        let mut outputs: Vec<Channels> = Vec::with_capacity(n_layers);
        let mut records = Vec::with_capacity(n_layers);
        for index in from..net.layers.len() {
            let prev = outputs.last().unwrap_or(input);
            let (out, rec) = forward_one(net, index, prev, true);
            outputs.push(out);
            records.push(rec.expect("recording requested"));
        }
        Tape {
            net,
            from,
            input,
            outputs,
            records,
        }
    }

    pub fn output(&self) -> &Channels {
        self.outputs.last().expect("at least one layer recorded")
    }

    /// Accumulates parameter gradients for layers `from..` into `grad`,
    /// given the adjoint of the network output channels.
    pub fn backward(&self, seed: Adjoint, grad: &mut ParamGradient) {
        let mut adj = seed;
        for k in (0..self.records.len()).rev() {
            let index = self.from + k;
            let layer = &self.net.layers[index];
            let rec = &self.records[k];
            let input = if k == 0 { self.input } else { &self.outputs[k - 1] };

            // Adjoints of the pre-activation channels.
            let (zv, zg, zs) = match &rec.d1 {
                None => (adj.val, adj.grad, adj.second),
                Some(d1) => {
                    let h = &self.outputs[k].val;
                    let mut zv = &adj.val * d1;
                    let (zg, zs) = match (&adj.grad, &adj.second, &rec.pre_grad, &rec.pre_second) {
                        (Some(ag), Some(asec), Some(pg), Some(ps)) => {
                            let mut zg = [Array2::zeros(h.raw_dim()), Array2::zeros(h.raw_dim())];
                            let mut zs = [Array2::zeros(h.raw_dim()), Array2::zeros(h.raw_dim())];
                            for c in 0..2 {
                                let zv_s = zv.as_slice_mut().expect("standard layout");
                                let zg_s = zg[c].as_slice_mut().expect("standard layout");
                                let zs_s = zs[c].as_slice_mut().expect("standard layout");
                                let (h_s, d1_s) = (contiguous(h), contiguous(d1));
                                let (ag_s, as_s) = (contiguous(&ag[c]), contiguous(&asec[c]));
                                let (pg_s, ps_s) = (contiguous(&pg[c]), contiguous(&ps[c]));
                                for i in 0..zv_s.len() {
                                    let (h, d1) = (h_s[i], d1_s[i]);
                                    let d2 = -2.0 * h * d1;
                                    let d3 = d1 * (4.0 * h * h - 2.0 * d1);
                                    let (ag, asec, pg) = (ag_s[i], as_s[i], pg_s[i]);
                                    zs_s[i] = asec * d1;
                                    zg_s[i] = ag * d1 + 2.0 * asec * d2 * pg;
                                    zv_s[i] += ag * d2 * pg + asec * (d3 * pg * pg + d2 * ps_s[i]);
                                }
                            }
                            (Some(zg), Some(zs))
                        }
                        _ => (None, None),
                    };
                    (zv, zg, zs)
                }
            };

            let g = &mut grad.layers[index];
            g.weights += &zv.dot(&input.val.t());
            g.bias += &zv.sum_axis(Axis(1));
            if let (Some(zg), Some(zs), Some(d)) = (&zg, &zs, &input.deriv) {
                for c in 0..2 {
                    g.weights += &zg[c].dot(&d.grad[c].t());
                    g.weights += &zs[c].dot(&d.second[c].t());
                }
            }

            if k == 0 {
                break;
            }
            let wt = layer.weights.t();
            adj = Adjoint {
                val: wt.dot(&zv),
                grad: zg.map(|z| [wt.dot(&z[0]), wt.dot(&z[1])]),
                second: zs.map(|z| [wt.dot(&z[0]), wt.dot(&z[1])]),
            };
        }
    }
}

fn contiguous(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
