use crate::error::{Error, Result};

/// One SGD step with heavy-ball momentum and L2 weight decay, in place:
/// `v ← momentum·v + g + weight_decay·p`, then `p ← p − lr·v`.
pub fn sgd_update(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut [Vec<f64>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "sgd_update: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::invalid(format!(
                "sgd_update: tensor {i} has {} values, grad {}, velocity {}",
                p.len(),
                g.len(),
                v.len()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Zero velocity buffers shaped like `params`.
pub fn zero_velocity(params: &[Vec<f64>]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![vec![1.0]];
        let mut v = zero_velocity(&p);
        sgd_update(&mut p, &[vec![0.5]], 0.1, 0.0, 0.0, &mut v).unwrap();
        assert!((p[0][0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![vec![1.5, -2.0]];
        let mut v = zero_velocity(&p);
        for _ in 0..3 {
            sgd_update(&mut p, &[vec![0.0, 0.0]], 0.1, 0.9, 0.0, &mut v).unwrap();
        }
        assert_eq!(p, vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        // v1 = g, v2 = 0.9g + g, so the displacement is lr·g·(1 + 1.9).
        let (lr, g) = (0.1, 0.7);
        let mut p = vec![vec![0.0]];
        let mut v = zero_velocity(&p);
        for _ in 0..2 {
            sgd_update(&mut p, &[vec![g]], lr, 0.9, 0.0, &mut v).unwrap();
        }
        assert!((p[0][0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_params() {
        let mut p = vec![vec![2.0]];
        let mut v = zero_velocity(&p);
        sgd_update(&mut p, &[vec![0.0]], 0.1, 0.0, 0.5, &mut v).unwrap();
        assert!((p[0][0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let mut p = vec![vec![1.0], vec![2.0]];
        let mut v = zero_velocity(&p);
        assert!(sgd_update(&mut p, &[vec![0.0]], 0.1, 0.0, 0.0, &mut v).is_err());
        assert!(sgd_update(&mut p, &[vec![0.0], vec![0.0, 1.0]], 0.1, 0.0, 0.0, &mut v).is_err());
    }
}
