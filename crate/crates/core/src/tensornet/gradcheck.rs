//! Central finite differences for checking analytic gradients.

use super::tensor::Tensor;

/// Numerical gradient of `f` at `x` with step `h`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe);
        probe.data_mut()[i] = v - h;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `max |a - b| / max(max |a|, max |b|)`, 0 when both are zero.
pub fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.data().iter().chain(b.data()).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let n = numeric_grad(&x, 1e-5, |t| t.data().iter().map(|v| v * v * v).sum());
        let a = x.map(|v| 3.0 * v * v);
        assert!(rel_error(&a, &n) < 1e-9);
    }
}
