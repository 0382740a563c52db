use super::{Result, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Used as the independent oracle for the tape's backward rules.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_sigmoid;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn log_sigmoid_slope_at_zero() {
        let x = Tensor::zeros(&[3]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| log_sigmoid(v)).sum()), &x, 1e-6)
            .unwrap();
        assert!(g.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
