use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Gradient-descent update rule with optional weight decay and cosine
/// learning-rate annealing. `step` consumes the gradients it applies, so a
/// second step without an intervening backward pass is a contract error.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cosine_t_max: Option<usize>,
    step_count: usize,
    slot1: Vec<Vec<f64>>,
    slot2: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay: 0.0,
            cosine_t_max: None,
            step_count: 0,
            slot1: Vec::new(),
            slot2: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            learning_rate,
            weight_decay: 0.0,
            cosine_t_max: None,
            step_count: 0,
            slot1: Vec::new(),
            slot2: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_cosine_annealing(mut self, t_max: usize) -> Self {
        self.cosine_t_max = Some(t_max);
        self
    }

    /// Learning rate in effect for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.cosine_t_max {
            Some(t_max) if t_max > 0 => {
                let t = (self.step_count.min(t_max)) as f64 / t_max as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.learning_rate,
        }
    }

    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let lr = self.current_lr();
        let mut params = model.params_mut();
        if self.slot1.is_empty() {
            self.slot1 = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.slot2 = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if params.iter().any(|p| p.grad.is_none()) {
            return Err(Error::contract(
                "optimizer step",
                "gradients not populated; run backward first",
            ));
        }
        let t = self.step_count + 1;
        for (idx, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().unwrap();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let vel = &mut self.slot1[idx];
                    for ((w, g), v) in p.data_mut().iter_mut().zip(&grad).zip(vel.iter_mut()) {
                        let g = g + self.weight_decay * *w;
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let (m, v) = (&mut self.slot1[idx], &mut self.slot2[idx]);
                    for (((w, g), mi), vi) in
                        p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let g = g + self.weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
        self.step_count = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-parameter linear model so updates are scalar arithmetic.
    fn scalar_model(w: f64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::build(&ArchSpec::Mlp { hidden: vec![] }, &[1], 1, &mut rng).unwrap();
        let mut ps = m.params_mut();
        ps[0].data_mut()[0] = w;
        ps[1].data_mut()[0] = 0.0;
        m
    }

    fn set_grads(m: &mut Model, weight_grad: f64) {
        for p in m.params_mut() {
            p.grad = Some(vec![weight_grad; p.numel()]);
        }
    }

    #[test]
    fn vanilla_sgd_one_step_arithmetic() {
        let mut m = scalar_model(1.0);
        set_grads(&mut m, 2.0);
        let mut opt = Optimizer::sgd_momentum(0.1, 0.0);
        opt.step(&mut m).unwrap();
        assert!((m.params()[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut m = scalar_model(1.5);
        set_grads(&mut m, 0.0);
        let before: Vec<f64> = m.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut m).unwrap();
        let after: Vec<f64> = m.params().iter().flat_map(|p| p.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn momentum_two_steps_match_recurrence() {
        // v1 = g1, w1 = w0 - lr v1; v2 = mu v1 + g2, w2 = w1 - lr v2.
        let (w0, g1, g2, lr, mu) = (1.0, 2.0, -1.0, 0.1, 0.9);
        let mut m = scalar_model(w0);
        let mut opt = Optimizer::sgd_momentum(lr, mu);
        set_grads(&mut m, g1);
        opt.step(&mut m).unwrap();
        set_grads(&mut m, g2);
        opt.step(&mut m).unwrap();
        let v1 = g1;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2;
        let w2 = w1 - lr * v2;
        assert!((m.params()[0].data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let (w0, g, lr) = (0.5, 3.0, 0.01);
        let mut m = scalar_model(w0);
        set_grads(&mut m, g);
        let mut opt = Optimizer::adam(lr);
        opt.step(&mut m).unwrap();
        // With bias correction the first step is lr * g / (|g| + eps).
        let expected = w0 - lr * g / (g.abs() + 1e-8);
        assert!((m.params()[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn step_before_backward_is_contract_error() {
        let mut m = scalar_model(1.0);
        let mut opt = Optimizer::sgd_momentum(0.1, 0.0);
        let err = opt.step(&mut m).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
        // And a second step after consuming gradients fails the same way.
        set_grads(&mut m, 1.0);
        opt.step(&mut m).unwrap();
        assert!(opt.step(&mut m).is_err());
    }

    #[test]
    fn nonzero_gradients_strictly_update() {
        let mut m = scalar_model(1.0);
        set_grads(&mut m, 0.7);
        let before = m.params()[0].data()[0];
        let mut opt = Optimizer::sgd_momentum(0.05, 0.9);
        opt.step(&mut m).unwrap();
        assert_ne!(before, m.params()[0].data()[0]);
    }

    #[test]
    fn cosine_annealing_decays_to_zero() {
        let mut opt = Optimizer::sgd_momentum(1.0, 0.0).with_cosine_annealing(10);
        assert!((opt.current_lr() - 1.0).abs() < 1e-12);
        let mut m = scalar_model(1.0);
        for _ in 0..10 {
            set_grads(&mut m, 0.0);
            opt.step(&mut m).unwrap();
        }
        assert!(opt.current_lr() < 1e-12);
    }
}
