use super::TrainError;
use crate::net::{Mlp, ParamGradient};

/// Adam hyperparameters; defaults are the published ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(format!("adam step size {} must be positive", self.step_size));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("adam {name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(format!("adam epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamGradient,
    pub v: ParamGradient,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        AdamState {
            m: ParamGradient::zeros_like(net),
            v: ParamGradient::zeros_like(net),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Layers with `trainable[i] == false` are
/// skipped entirely: neither their parameters nor their moments change.
pub fn adam_step(
    net: &mut Mlp,
    grad: &ParamGradient,
    state: &mut AdamState,
    hp: &AdamParams,
    trainable: &[bool],
) -> Result<(), TrainError> {
    if !grad.is_congruent(net) || !state.m.is_congruent(net) || !state.v.is_congruent(net) {
        return Err(TrainError::ShapeMismatch);
    }
    if trainable.len() != net.layers().len() {
        return Err(TrainError::MaskLength {
            expected: net.layers().len(),
            found: trainable.len(),
        });
    }
    if !grad.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2, lr, eps) = (hp.beta1, hp.beta2, hp.step_size, hp.epsilon);

    for (index, layer) in net.layers_mut().iter_mut().enumerate() {
        if !trainable[index] {
            continue;
        }
        let g = &grad.layers[index];
        let m = &mut state.m.layers[index];
        let v = &mut state.v.layers[index];
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        ndarray::Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::uniform_widths;
    use crate::trainer::{rng_for, Stream};

    fn net() -> Mlp {
        Mlp::glorot_init(&uniform_widths(3, 2), &mut rng_for(1, Stream::Init)).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut n = net();
        let before = n.clone();
        let mut s = AdamState::new(&n);
        let g = ParamGradient::zeros_like(&n);
        adam_step(&mut n, &g, &mut s, &AdamParams::default(), &[true; 3]).unwrap();
        assert_eq!(n, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn constant_gradient_step_tends_to_step_size() {
        let mut n = net();
        let mut s = AdamState::new(&n);
        let mut g = ParamGradient::zeros_like(&n);
        for l in &mut g.layers {
            l.weights.fill(0.37);
            l.bias.fill(-2.0);
        }
        let hp = AdamParams::default();
        let mut last = n.clone();
        for _ in 0..2000 {
            adam_step(&mut n, &g, &mut s, &hp, &[true; 3]).unwrap();
            let w_step = (n.layers()[0].weights[[0, 0]] - last.layers()[0].weights[[0, 0]]).abs();
            let b_step = (n.layers()[1].bias[0] - last.layers()[1].bias[0]).abs();
            // Bias correction makes every step exactly α·g/(|g|+ε) here.
            assert!((w_step - hp.step_size).abs() < 1e-9);
            assert!((b_step - hp.step_size).abs() < 1e-9);
            last = n.clone();
        }
    }

    #[test]
    fn masked_layers_are_untouched() {
        let mut n = net();
        let before = n.clone();
        let mut s = AdamState::new(&n);
        let mut g = ParamGradient::zeros_like(&n);
        for l in &mut g.layers {
            l.weights.fill(1.0);
        }
        adam_step(&mut n, &g, &mut s, &AdamParams::default(), &[false, true, true]).unwrap();
        assert_eq!(n.layers()[0], before.layers()[0]);
        assert_ne!(n.layers()[1], before.layers()[1]);
        assert!(s.m.layers[0].weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut n = net();
        let mut s = AdamState::new(&n);
        let mut g = ParamGradient::zeros_like(&n);
        g.layers[0].weights[[0, 0]] = f64::NAN;
        assert!(matches!(
            adam_step(&mut n, &g, &mut s, &AdamParams::default(), &[true; 3]),
            Err(TrainError::NonFiniteGradient)
        ));
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut n = net();
            let mut s = AdamState::new(&n);
            let mut g = ParamGradient::zeros_like(&n);
            for (i, l) in g.layers.iter_mut().enumerate() {
                l.weights.fill(0.1 * (i as f64 + 1.0));
            }
            for _ in 0..10 {
                adam_step(&mut n, &g, &mut s, &AdamParams::default(), &[true; 3]).unwrap();
            }
            (n, s)
        };
        assert_eq!(run(), run());
    }
}
