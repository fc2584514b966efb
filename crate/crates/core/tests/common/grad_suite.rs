//! Finite-difference gradient checks over randomized small shapes, shared by
//! the integration tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl2d::represent::{loss_hm, loss_rg, loss_tg};
use ssl2d::tensornet::conv::{conv2d_backward, conv2d_forward, dconv2d_backward, dconv2d_forward};
use ssl2d::tensornet::gradcheck::{numeric_grad, rel_error};
use ssl2d::tensornet::norm::{
    batchnorm2d_backward, batchnorm2d_train, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward,
};
use ssl2d::tensornet::{ConvGeom, Tensor};

const H: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn nchw(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(3..=8), rng.gen_range(3..=8)]
}

fn geom(rng: &mut ChaCha8Rng) -> ConvGeom {
    let k = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    ConvGeom::new(
        k,
        (rng.gen_range(1..=2), rng.gen_range(1..=2)),
        (rng.gen_range(0..k.0), rng.gen_range(0..k.1)),
    )
}

/// Worst relative error per operation over `cases` random draws.
pub fn run(seed: u64, cases: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("conv2d", 0.0f64),
        ("dconv2d", 0.0),
        ("batchnorm2d", 0.0),
        ("relu", 0.0),
        ("leaky_relu", 0.0),
        ("sigmoid", 0.0),
        ("loss_tg", 0.0),
        ("loss_hm", 0.0),
        ("loss_rg", 0.0),
    ];
    let mut record = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = slot.1.max(e);
    };
    for _ in 0..cases {
        // Convolution.
        let s = nchw(&mut rng);
        let g = geom(&mut rng);
        let oc = rng.gen_range(1..=4);
        let (kh, kw) = g.kernel;
        let x = uniform(&mut rng, &s, -1.0, 1.0);
        let w = uniform(&mut rng, &[oc, s[1], kh, kw], -1.0, 1.0);
        let b = uniform(&mut rng, &[oc], -1.0, 1.0);
        let y = conv2d_forward(&x, &w, &b, &g, "conv").unwrap();
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let (dx, dw, db) = conv2d_backward(&x, &w, &b, &r, &g, true, "conv").unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| weighted_sum(&conv2d_forward(x, w, b, &g, "conv").unwrap(), &r);
        record("conv2d", rel_error(&dx.unwrap(), &numeric_grad(&x, H, |t| f(t, &w, &b))));
        record("conv2d", rel_error(&dw, &numeric_grad(&w, H, |t| f(&x, t, &b))));
        record("conv2d", rel_error(&db, &numeric_grad(&b, H, |t| f(&x, &w, t))));

        // Transposed convolution.
        let s = nchw(&mut rng);
        let g = geom(&mut rng);
        let oc = rng.gen_range(1..=4);
        let (kh, kw) = g.kernel;
        let x = uniform(&mut rng, &s, -1.0, 1.0);
        let w = uniform(&mut rng, &[s[1], oc, kh, kw], -1.0, 1.0);
        let b = uniform(&mut rng, &[oc], -1.0, 1.0);
        if let Ok(y) = dconv2d_forward(&x, &w, &b, &g, "dconv") {
            let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
            let (dx, dw, db) = dconv2d_backward(&x, &w, &b, &r, &g, true, "dconv").unwrap();
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                weighted_sum(&dconv2d_forward(x, w, b, &g, "dconv").unwrap(), &r)
            };
            record("dconv2d", rel_error(&dx.unwrap(), &numeric_grad(&x, H, |t| f(t, &w, &b))));
            record("dconv2d", rel_error(&dw, &numeric_grad(&w, H, |t| f(&x, t, &b))));
            record("dconv2d", rel_error(&db, &numeric_grad(&b, H, |t| f(&x, &w, t))));
        }

        // Batch normalization in training mode.
        let s = nchw(&mut rng);
        let x = uniform(&mut rng, &s, -2.0, 2.0);
        let gamma = uniform(&mut rng, &[s[1]], 0.5, 1.5);
        let beta = uniform(&mut rng, &[s[1]], -0.5, 0.5);
        let (y, cache, _) = batchnorm2d_train(&x, &gamma, &beta, "bn").unwrap();
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let (dx, dg, db) = batchnorm2d_backward(&cache, &gamma, &r, "bn").unwrap();
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| weighted_sum(&batchnorm2d_train(x, g, b, "bn").unwrap().0, &r);
        record("batchnorm2d", rel_error(&dx, &numeric_grad(&x, H, |t| f(t, &gamma, &beta))));
        record("batchnorm2d", rel_error(&dg, &numeric_grad(&gamma, H, |t| f(&x, t, &beta))));
        record("batchnorm2d", rel_error(&db, &numeric_grad(&beta, H, |t| f(&x, &gamma, t))));

        // Activations, sampled away from the kink.
        let s = nchw(&mut rng);
        let x = uniform(&mut rng, &s, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.1 + v } else { v });
        let r = uniform(&mut rng, &s, -1.0, 1.0);
        record("relu", rel_error(&relu_backward(&x, &r).unwrap(), &numeric_grad(&x, H, |t| weighted_sum(&relu(t), &r))));
        record(
            "leaky_relu",
            rel_error(
                &leaky_relu_backward(&x, &r, 0.01).unwrap(),
                &numeric_grad(&x, H, |t| weighted_sum(&leaky_relu(t, 0.01), &r)),
            ),
        );
        let z = uniform(&mut rng, &s, -4.0, 4.0);
        record(
            "sigmoid",
            rel_error(&sigmoid_backward(&z, &r).unwrap(), &numeric_grad(&z, H, |t| weighted_sum(&sigmoid(t), &r))),
        );

        // Losses.
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let p = uniform(&mut rng, &[1, h, w], 0.05, 0.95);
        let gt = Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let lambda = rng.gen_range(0.01..1.0);
        let (_, d) = loss_tg(&p, &gt, lambda).unwrap();
        record("loss_tg", rel_error(&d, &numeric_grad(&p, H, |t| loss_tg(t, &gt, lambda).unwrap().0)));

        let p = uniform(&mut rng, &[1, h, w], -0.2, 1.2);
        let gt = uniform(&mut rng, &[1, h, w], 0.0, 1.0);
        let (_, d) = loss_hm(&p, &gt).unwrap();
        record("loss_hm", rel_error(&d, &numeric_grad(&p, H, |t| loss_hm(t, &gt).unwrap().0)));

        let plane = h * w;
        let p = Tensor::from_fn(&[3, h, w], |i| {
            if i < plane {
                rng.gen_range(0.05..0.95)
            } else {
                rng.gen_range(-0.2..1.2)
            }
        });
        let gt = Tensor::from_fn(&[3, h, w], |i| {
            if i < plane {
                if rng.gen_bool(0.4) {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.gen_range(0.0..1.0)
            }
        });
        let (l1, l2) = (rng.gen_range(0.1..1.0), rng.gen_range(1.0..10.0));
        let (_, d) = loss_rg(&p, &gt, l1, l2).unwrap();
        record("loss_rg", rel_error(&d, &numeric_grad(&p, H, |t| loss_rg(t, &gt, l1, l2).unwrap().0)));
    }
    worst
}
