use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Heavy-ball momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub velocity: ParamStore,
}

impl Momentum {
    pub fn new(params: &ParamStore) -> Self {
        Momentum {
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← momentum·v − lr·g; p ← p + v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut Momentum,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    params.expect_compatible(grads)?;
    params.expect_compatible(&state.velocity)?;
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(())
}

/// Multistep schedule: `lr_start · 0.1^k` after `k` passed milestones,
/// never below `lr_end`.
pub fn lr_at(epoch: usize, lr_start: f64, lr_end: f64, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    let mut lr = lr_start;
    for _ in 0..passed {
        lr /= 10.0;
    }
    // Within rounding of the floor counts as the floor.
    if lr <= lr_end * (1.0 + 1e-9) {
        lr_end
    } else {
        lr
    }
}

pub(crate) fn validate_schedule(lr_start: f64, lr_end: f64, milestones: &[usize]) -> Result<()> {
    if !(lr_start >= 0.0 && lr_end >= 0.0 && lr_end <= lr_start) {
        return Err(Error::Config(format!(
            "need 0 ≤ lr_end ≤ lr_start, got lr_start={lr_start:e} lr_end={lr_end:e}"
        )));
    }
    if milestones.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!(
            "lr milestones must be sorted, got {milestones:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Shape, Tensor};

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let t =
            Tensor::from_vec(Shape::new(1, 1, 1, values.len()).unwrap(), values.to_vec()).unwrap();
        s.insert("p", t).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_velocity_is_noop() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = Momentum::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.5, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_momentum_is_plain_descent_bitwise() {
        let mut rng = Rng::seed(1);
        let s = Shape::new(1, 1, 4, 4).unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::randn(s, &mut rng, 1.0).unwrap())
            .unwrap();
        let mut g = ParamStore::new();
        g.insert("w", Tensor::randn(s, &mut rng, 1.0).unwrap())
            .unwrap();
        let lr = 0.037;
        let mut plain = p.clone();
        let mut st = Momentum::new(&p);
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut st, lr, 0.0).unwrap();
            for (a, b) in plain.tensors_mut()[0]
                .data_mut()
                .iter_mut()
                .zip(g.tensors()[0].data())
            {
                *a -= lr * b;
            }
        }
        assert_eq!(p, plain);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        // v1 = -g, p1 = p0 - g; v2 = -0.9g - g, p2 = p0 - 2.9g
        let mut p = store(&[0.0, 0.0]);
        let g = store(&[1.0, -2.0]);
        let mut st = Momentum::new(&p);
        sgd_step(&mut p, &g, &mut st, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut st, 1.0, 0.9).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] + 2.9).abs() < 1e-15);
        assert!((d[1] - 5.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[0.0, 0.0]);
        let g = store(&[1.0]);
        let mut st = Momentum::new(&p);
        assert!(sgd_step(&mut p, &g, &mut st, 1.0, 0.9).is_err());
    }

    #[test]
    fn multistep_schedule() {
        let ms = [100, 200];
        assert_eq!(lr_at(0, 1e-6, 1e-8, &ms), 1e-6);
        assert_eq!(lr_at(99, 1e-6, 1e-8, &ms), 1e-6);
        assert!((lr_at(100, 1e-6, 1e-8, &ms) - 1e-7).abs() < 1e-20);
        assert_eq!(lr_at(200, 1e-6, 1e-8, &ms), 1e-8);
        assert_eq!(lr_at(249, 1e-6, 1e-8, &ms), 1e-8);
        assert_eq!(lr_at(5000, 1e-6, 1e-8, &[1, 2, 3, 4]), 1e-8);
        assert_eq!(lr_at(77, 1e-6, 1e-8, &[]), 1e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(1e-6, 1e-8, &[100, 200]).is_ok());
        assert!(validate_schedule(1e-8, 1e-6, &[]).is_err());
        assert!(validate_schedule(1e-6, 1e-8, &[200, 100]).is_err());
    }
}
