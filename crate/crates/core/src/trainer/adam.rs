//! Adam with bias correction and L2 weight decay folded into the gradient.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update at step `t` (1-based). `weight_decay` adds `wd · p` to the gradient.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, lr: f64, weight_decay: f64, t: u64) {
    assert_eq!(params.len(), grads.len(), "param/grad length");
    assert!(t >= 1, "adam step counter starts at 1");
    if state.m.len() != params.len() {
        *state = AdamMoments::new(params.len());
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + weight_decay * *p;
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

/// Step counter plus one moment slot per registered tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    t: u64,
    slots: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, tensors: usize) -> Self {
        Self {
            lr,
            weight_decay,
            t: 0,
            slots: vec![AdamMoments::default(); tensors],
        }
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        adam_step(params, grads, &mut self.slots[slot], self.lr, wd, self.t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamMoments::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, 0.0, 1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g²  ⇒  Δ = −lr · g / (|g| + ε)
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamMoments::new(3);
        adam_step(&mut p, &g, &mut s, 0.01, 0.0, 1);
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + EPSILON);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.3, 0.7];
            let mut s = AdamMoments::new(2);
            for t in 1..=5 {
                adam_step(&mut p, &[0.1 * t as f64, -0.2], &mut s, 1e-3, 1e-4, t);
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weight_decay_acts_as_l2_gradient() {
        let mut a = vec![2.0];
        let mut sa = AdamMoments::new(1);
        adam_step(&mut a, &[0.0], &mut sa, 0.1, 0.5, 1);
        let mut b = vec![2.0];
        let mut sb = AdamMoments::new(1);
        adam_step(&mut b, &[1.0], &mut sb, 0.1, 0.0, 1);
        assert_eq!(a, b);
    }
}
