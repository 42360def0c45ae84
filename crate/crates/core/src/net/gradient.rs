//! The composite PDE/boundary loss and its exact parameter gradient.
//!
//! Interior points contribute `|∇²u − s|^k`, boundary points `η |u|^k`
//! (`k = 2` for L2, `k = 1` for L1); the loss is the mean over all points.

use ndarray::Array2;

use super::tape::{Adjoint, Channels, Tape};
use super::{Mlp, NetError, ParamGradient};
use crate::bvp::{BvpSpec, LossNorm, PointTag, TaggedPointSet};

/// Points per propagated chunk. Fixes the summation order, so results do not
/// depend on batch size beyond this constant.
const CHUNK: usize = 2048;

struct InteriorChunk {
    channels: Channels,
    source: Vec<f64>,
}

/// A batch already split by tag, chunked, and propagated through a leading
/// run of layers whose parameters will not change while it is in use.
pub struct PreparedBatch {
    start_layer: usize,
    interior: Vec<InteriorChunk>,
    boundary: Vec<Channels>,
    total: usize,
}

impl PreparedBatch {
    /// `frozen_prefix` layers are evaluated once here; gradients are only
    /// produced for layers after them.
    pub fn new(net: &Mlp, batch: &TaggedPointSet, spec: &BvpSpec, frozen_prefix: usize) -> Result<Self, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        assert!(frozen_prefix < net.layers().len(), "readout layer cannot be frozen");
        let mut interior_pts = Vec::with_capacity(batch.count(PointTag::Interior));
        let mut boundary_pts = Vec::with_capacity(batch.count(PointTag::Boundary));
        for (p, tag) in batch.iter() {
            match tag {
                PointTag::Interior => interior_pts.push(p),
                PointTag::Boundary => boundary_pts.push(p),
            }
        }
        let check = |pts: &[[f64; 2]]| match pts.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
            Some(p) => Err(NetError::NonFiniteInput(p[0], p[1])),
            None => Ok(()),
        };
        check(&interior_pts)?;
        check(&boundary_pts)?;

        let advance = |c: Channels| -> Channels {
            let mut c = c;
            for index in 0..frozen_prefix {
                c = super::tape::layer_forward(net, index, &c);
            }
            c
        };
        let interior = interior_pts
            .chunks(CHUNK)
            .map(|pts| InteriorChunk {
                channels: advance(Channels::with_input_derivatives(pts)),
                source: pts.iter().map(|&p| spec.source_term(p)).collect(),
            })
            .collect();
        let boundary = boundary_pts
            .chunks(CHUNK)
            .map(|pts| advance(Channels::values_of(pts)))
            .collect();
        Ok(PreparedBatch {
            start_layer: frozen_prefix,
            interior,
            boundary,
            total: batch.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn frozen_prefix(&self) -> usize {
        self.start_layer
    }

    /// Mean loss and its gradient with respect to layers after the frozen
    /// prefix (frozen layers receive zero gradient).
    pub fn loss_and_gradient(&self, net: &Mlp, eta: f64, norm: LossNorm) -> (f64, ParamGradient) {
        let mut grad = ParamGradient::zeros_like(net);
        let mut sum = 0.0;
        for chunk in &self.interior {
            let tape = Tape::record(net, &chunk.channels, self.start_layer);
            let out = tape.output();
            let d = out.deriv.as_ref().expect("interior chunks carry derivatives");
            let n = chunk.source.len();
            let mut seed = Array2::zeros((1, n));
            for j in 0..n {
                let residual = d.second[0][[0, j]] + d.second[1][[0, j]] - chunk.source[j];
                sum += norm.penalty(residual);
                seed[[0, j]] = norm.penalty_slope(residual);
            }
            tape.backward(
                Adjoint {
                    val: Array2::zeros((1, n)),
                    grad: Some([Array2::zeros((1, n)), Array2::zeros((1, n))]),
                    second: Some([seed.clone(), seed]),
                },
                &mut grad,
            );
        }
        for chunk in &self.boundary {
            let tape = Tape::record(net, chunk, self.start_layer);
            let u = &tape.output().val;
            let mut seed = Array2::zeros(u.raw_dim());
            for (s, &v) in seed.iter_mut().zip(u.iter()) {
                sum += eta * norm.penalty(v);
                *s = eta * norm.penalty_slope(v);
            }
            tape.backward(
                Adjoint {
                    val: seed,
                    grad: None,
                    second: None,
                },
                &mut grad,
            );
        }
        let inv = 1.0 / self.total as f64;
        grad.scale(inv);
        (sum * inv, grad)
    }

    /// Mean loss only.
    pub fn loss(&self, net: &Mlp, eta: f64, norm: LossNorm) -> f64 {
        let mut sum = 0.0;
        for chunk in &self.interior {
            let out = net.forward_channels(chunk.channels.clone(), self.start_layer);
            let d = out.deriv.as_ref().expect("interior chunks carry derivatives");
            for (j, &s) in chunk.source.iter().enumerate() {
                sum += norm.penalty(d.second[0][[0, j]] + d.second[1][[0, j]] - s);
            }
        }
        for chunk in &self.boundary {
            let out = net.forward_channels(chunk.clone(), self.start_layer);
            sum += out.val.iter().map(|&u| eta * norm.penalty(u)).sum::<f64>();
        }
        sum / self.total as f64
    }
}

/// Mean pointwise loss over `batch` and its exact gradient with respect to
/// every weight and bias.
pub fn loss_param_gradient(
    net: &Mlp,
    batch: &TaggedPointSet,
    spec: &BvpSpec,
    norm: LossNorm,
) -> Result<(f64, ParamGradient), NetError> {
    let prepared = PreparedBatch::new(net, batch, spec, 0)?;
    Ok(prepared.loss_and_gradient(net, spec.eta, norm))
}

/// Mean pointwise loss over `batch`.
pub fn evaluate_loss(net: &Mlp, batch: &TaggedPointSet, spec: &BvpSpec, norm: LossNorm) -> Result<f64, NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let mut sum = 0.0;
    let interior: Vec<[f64; 2]> = batch.points_tagged(PointTag::Interior).collect();
    let boundary: Vec<[f64; 2]> = batch.points_tagged(PointTag::Boundary).collect();
    for pts in interior.chunks(CHUNK) {
        for (b, &p) in net.derivatives(pts)?.iter().zip(pts) {
            sum += norm.penalty(b.laplacian() - spec.source_term(p));
        }
    }
    for pts in boundary.chunks(CHUNK) {
        sum += net.values(pts)?.iter().map(|&u| spec.eta * norm.penalty(u)).sum::<f64>();
    }
    Ok(sum / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::uniform_widths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(width: usize, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::glorot_init(&uniform_widths(width, 3), &mut rng).unwrap();
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        net
    }

    #[test]
    fn zero_net_interior_loss_is_mean_source_squared() {
        let spec = BvpSpec::with_x_source(0.2).unwrap();
        let pts = vec![[0.2, 0.0], [0.1, 0.05], [-0.3, 0.4]];
        let batch = TaggedPointSet::from_parts(pts.clone(), vec![PointTag::Interior; 3]).unwrap();
        let net = Mlp::zeros(&uniform_widths(4, 4)).unwrap();
        let (loss, grad) = loss_param_gradient(&net, &batch, &spec, LossNorm::L2).unwrap();
        let expected = pts.iter().map(|&p| spec.source_term(p).powi(2)).sum::<f64>() / 3.0;
        assert!((loss - expected).abs() < 1e-12 * expected);
        assert_eq!(grad.layers.last().unwrap().bias[0], 0.0);
    }

    #[test]
    fn satisfied_boundary_contributes_nothing() {
        let spec = BvpSpec::default();
        let batch = TaggedPointSet::from_parts(vec![[1.0, 0.3], [-0.2, -1.0]], vec![PointTag::Boundary; 2]).unwrap();
        let net = Mlp::zeros(&uniform_widths(4, 2)).unwrap();
        let (loss, grad) = loss_param_gradient(&net, &batch, &spec, LossNorm::L2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.layers.iter().all(|l| l.weights.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = Mlp::zeros(&uniform_widths(4, 2)).unwrap();
        let empty = TaggedPointSet::from_parts(vec![], vec![]).unwrap();
        assert_eq!(
            loss_param_gradient(&net, &empty, &BvpSpec::default(), LossNorm::L2).unwrap_err(),
            NetError::EmptyBatch
        );
    }

    #[test]
    fn frozen_prefix_matches_full_gradient_on_trailing_layers() {
        let net = random_net(6, 5);
        let spec = BvpSpec::with_x_source(0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = crate::bvp::sample_training_set(&mut rng, &spec, 20, 5);
        let full = PreparedBatch::new(&net, &batch, &spec, 0).unwrap();
        let cut = PreparedBatch::new(&net, &batch, &spec, 2).unwrap();
        let (l0, g0) = full.loss_and_gradient(&net, spec.eta, LossNorm::L2);
        let (l1, g1) = cut.loss_and_gradient(&net, spec.eta, LossNorm::L2);
        assert!((l0 - l1).abs() <= 1e-12 * l0);
        for i in 0..2 {
            assert!(g1.layers[i].weights.iter().all(|&v| v == 0.0));
        }
        for i in 2..net.layers().len() {
            for (a, b) in g0.layers[i].weights.iter().zip(g1.layers[i].weights.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }
        assert!((full.loss(&net, spec.eta, LossNorm::L2) - l0).abs() <= 1e-12 * l0);
        assert!((evaluate_loss(&net, &batch, &spec, LossNorm::L2).unwrap() - l0).abs() <= 1e-12 * l0);
    }

    #[test]
    fn l1_gradient_at_zero_residual_is_zero() {
        // u ≡ 0 on the boundary: L1 subgradient there is 0.
        let spec = BvpSpec::default();
        let batch = TaggedPointSet::from_parts(vec![[1.0, 0.0]], vec![PointTag::Boundary]).unwrap();
        let net = Mlp::zeros(&uniform_widths(3, 2)).unwrap();
        let (loss, grad) = loss_param_gradient(&net, &batch, &spec, LossNorm::L1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.layers.last().unwrap().bias[0], 0.0);
    }
}
