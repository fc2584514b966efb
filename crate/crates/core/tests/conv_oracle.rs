use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl2d::tensornet::conv::{conv2d_backward, conv2d_forward, dconv2d_forward};
use ssl2d::tensornet::{ConvGeom, Tensor};

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let oc = w.shape()[0];
    let (kh, kw) = g.kernel;
    let (oh, ow) = g.conv_out(h, wd).unwrap();
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    for i in 0..n {
        for o in 0..oc {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for a in 0..kh {
                            for e in 0..kw {
                                let yy = (r * g.stride.0 + a) as isize - g.padding.0 as isize;
                                let xx = (q * g.stride.1 + e) as isize - g.padding.1 as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((i * c + ch) * h + yy as usize) * wd + xx as usize]
                                    * w.data()[((o * c + ch) * kh + a) * kw + e];
                            }
                        }
                    }
                    y.data_mut()[((i * oc + o) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    y
}

fn direct_dconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let oc = w.shape()[1];
    let (kh, kw) = g.kernel;
    let (oh, ow) = g.dconv_out(h, wd).unwrap();
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    for i in 0..n {
        for o in 0..oc {
            for v in &mut y.data_mut()[(i * oc + o) * oh * ow..][..oh * ow] {
                *v = b.data()[o];
            }
        }
        for ch in 0..c {
            for r in 0..h {
                for q in 0..wd {
                    let xv = x.data()[((i * c + ch) * h + r) * wd + q];
                    for o in 0..oc {
                        for a in 0..kh {
                            for e in 0..kw {
                                let yy = (r * g.stride.0 + a) as isize - g.padding.0 as isize;
                                let xx = (q * g.stride.1 + e) as isize - g.padding.1 as isize;
                                if yy < 0 || xx < 0 || yy >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                y.data_mut()[((i * oc + o) * oh + yy as usize) * ow + xx as usize] +=
                                    xv * w.data()[((ch * oc + o) * kh + a) * kw + e];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_case(rng: &mut ChaCha8Rng) -> ([usize; 4], usize, ConvGeom) {
    let k = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let g = ConvGeom::new(
        k,
        (rng.gen_range(1..=3), rng.gen_range(1..=3)),
        (rng.gen_range(0..k.0), rng.gen_range(0..k.1)),
    );
    let s = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=10), rng.gen_range(1..=10)];
    (s, rng.gen_range(1..=5), g)
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 150 {
        let (s, oc, g) = random_case(&mut rng);
        if g.conv_out(s[2], s[3]).is_none() {
            continue;
        }
        let x = random(&mut rng, &s);
        let w = random(&mut rng, &[oc, s[1], g.kernel.0, g.kernel.1]);
        let b = random(&mut rng, &[oc]);
        let y = conv2d_forward(&x, &w, &b, &g, "t").unwrap();
        assert!(max_diff(&y, &direct_conv(&x, &w, &b, &g)) < 1e-12, "{s:?} {g:?}");
        checked += 1;
    }
}

#[test]
fn dconv_matches_direct_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 150 {
        let (s, oc, g) = random_case(&mut rng);
        if g.dconv_out(s[2], s[3]).is_none() {
            continue;
        }
        let x = random(&mut rng, &s);
        let w = random(&mut rng, &[s[1], oc, g.kernel.0, g.kernel.1]);
        let b = random(&mut rng, &[oc]);
        let y = dconv2d_forward(&x, &w, &b, &g, "t").unwrap();
        assert!(max_diff(&y, &direct_dconv(&x, &w, &b, &g)) < 1e-12, "{s:?} {g:?}");
        checked += 1;
    }
}

#[test]
fn conv_input_gradient_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 100 {
        let (s, oc, g) = random_case(&mut rng);
        let Some((oh, ow)) = g.conv_out(s[2], s[3]) else { continue };
        let x = random(&mut rng, &s);
        let w = random(&mut rng, &[oc, s[1], g.kernel.0, g.kernel.1]);
        let zero = Tensor::zeros(&[oc]);
        let u = random(&mut rng, &[s[0], oc, oh, ow]);
        let y = conv2d_forward(&x, &w, &zero, &g, "t").unwrap();
        let (dx, _, _) = conv2d_backward(&x, &w, &zero, &u, &g, true, "t").unwrap();
        let dx = dx.unwrap();
        // <A x, u> = <x, Aᵀ u>
        let lhs = y.dot(&u);
        let rhs = x.dot(&dx);
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        // The transposed convolution with the same weights is Aᵀ when sizes line up.
        if g.dconv_out(oh, ow) == Some((s[2], s[3])) {
            let t = dconv2d_forward(&u, &w, &Tensor::zeros(&[s[1]]), &g, "t").unwrap();
            assert!(max_diff(&t, &dx) < 1e-12);
        }
        checked += 1;
    }
}
