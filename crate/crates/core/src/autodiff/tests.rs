use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckConfig};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Builds `sum(op(inputs) ⊙ R)` for a fixed random `R` and grad-checks every input.
fn check<F>(seed: u64, inputs: Vec<Tensor<f64>>, op: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut params = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("in{i}"), t).unwrap())
        .collect();
    let out_shape = {
        let mut g = Graph::new(&params);
        let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let out = op(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let weights = rand_tensor(&mut rng, &out_shape);
    let report = grad_check(
        &mut params,
        |g| {
            let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
            let out = op(g, &vars)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_err()
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn for_seeds(name: &str, mut f: impl FnMut(u64, &mut ChaCha8Rng) -> f64) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = f(seed, &mut rng);
        assert!(err < TOL, "{name}: seed {seed} rel_err {err}");
    }
}

/// Direct nested-loop convolution used as the oracle for the im2col path.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[o, ho, wo], |idx| {
        let (oc, y, xx) = (idx / (ho * wo), idx / wo % ho, idx % wo);
        let mut acc = b[oc];
        for ci in 0..c {
            for u in 0..k {
                for v in 0..k {
                    let iy = (y * stride + u) as isize - pad as isize;
                    let ix = (xx * stride + v) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(&[ci, iy as usize, ix as usize]).unwrap()
                            * w.at(&[oc, ci, u, v]).unwrap();
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

fn eval(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> Result<Tensor<f64>> {
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let vars: Vec<_> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let out = op(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

#[test]
fn conv2d_identity_and_sum_kernels() {
    let out = eval(
        vec![Tensor::ones(&[1, 3, 3]).unwrap(), Tensor::ones(&[1, 1, 1, 1]).unwrap(), Tensor::zeros(&[1]).unwrap()],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, (0, 0)),
    )
    .unwrap();
    assert_eq!(out.shape(), &[1, 3, 3]);
    assert!(out.data().iter().all(|&x| x == 1.0));

    let out = eval(
        vec![Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap(), Tensor::ones(&[1, 1, 2, 2]).unwrap()],
        |g, v| g.conv2d(v[0], v[1], None, 1, (0, 0)),
    )
    .unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[10.0]);
}

#[test]
fn conv2d_strided_padded_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let expect = conv_oracle(&x, &w, &[0.0], 2, 1);
    let got = eval(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, 2, (1, 1))).unwrap();
    assert_eq!(got.shape(), &[1, 2, 2]);
    assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);

    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, o, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let h = rng.gen_range(k..k + 5);
        let x = rand_tensor(&mut rng, &[c, h, h]);
        let w = rand_tensor(&mut rng, &[o, c, k, k]);
        let b = rand_tensor(&mut rng, &[o]);
        let expect = conv_oracle(&x, &w, b.data(), stride, pad);
        let got = eval(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, (pad, pad))).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let r = eval(
        vec![Tensor::ones(&[2, 3, 3]).unwrap(), Tensor::ones(&[1, 3, 1, 1]).unwrap()],
        |g, v| g.conv2d(v[0], v[1], None, 1, (0, 0)),
    );
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn softmax_examples() {
    let sm = |v: Vec<f64>| {
        let n = v.len();
        eval(vec![Tensor::new(&[n], v).unwrap()], |g, x| Ok(g.softmax(x[0]))).unwrap()
    };
    for &p in sm(vec![0.0, 0.0, 0.0]).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = sm(vec![1000.0, 0.0, 0.0]);
    assert!(big.all_finite());
    assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);
    let hand = [0.09003057, 0.24472847, 0.66524096];
    for (a, b) in sm(vec![1.0, 2.0, 3.0]).data().iter().zip(hand) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn layer_norm_examples() {
    let ln = |v: Vec<f64>, gamma: f64, beta: f64, eps: f64| {
        let n = v.len();
        eval(
            vec![Tensor::new(&[n], v).unwrap(), Tensor::full(&[n], gamma).unwrap(), Tensor::full(&[n], beta).unwrap()],
            |g, x| g.layer_norm(x[0], x[1], x[2], eps),
        )
        .unwrap()
    };
    assert!(ln(vec![5.0; 4], 1.0, 0.0, 1e-5).data().iter().all(|&x| x == 0.0));
    let y = ln(vec![-1.0, 1.0], 1.0, 0.0, 1e-12);
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    // mean 2.5, var 1.25: (x − 2.5)/sqrt(1.25 + 1e-5)·2 + 1
    let hand: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|x| (x - 2.5) / (1.25f64 + 1e-5).sqrt() * 2.0 + 1.0).collect();
    let y = ln(vec![1.0, 2.0, 3.0, 4.0], 2.0, 1.0, 1e-5);
    for ((a, b), c) in y.data().iter().zip(&hand).zip([-1.6833, 0.1056, 1.8944, 3.6833]) {
        assert!((a - b).abs() < 1e-12);
        assert!((a - c).abs() < 1e-4);
    }
}

#[test]
fn backward_trivial_cases() {
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let g1 = {
        let mut g = Graph::new(&params);
        let v = g.param(w);
        let s = g.sum(v);
        g.backward(s).unwrap().params
    };
    assert_eq!(g1.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    let g2 = {
        let mut g = Graph::new(&params);
        let v = g.param(w);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap().params
    };
    assert_eq!(g2.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    params.accumulate(&g1);
    params.accumulate(&g2);
    assert_eq!(params.get(w).grad.data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut params = ParamStore::<f64>::new();
    let w = params.add("w", Tensor::ones(&[2]).unwrap()).unwrap();
    let mut g = Graph::new(&params);
    let v = g.param(w);
    assert!(matches!(g.backward(v), Err(Error::InvalidArgument(_))));
}

#[test]
fn input_gradients_are_reported() {
    let params = ParamStore::<f64>::new();
    let mut g = Graph::new(&params);
    let x = g.input(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let b = g.backward(s).unwrap();
    assert_eq!(b.input_grad(x).unwrap().data(), &[6.0, 8.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 9, 9]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let a = eval(vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, 2, (1, 1))).unwrap();
    let b = eval(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, 2, (1, 1))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grad_elementwise() {
    for_seeds("add", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh), rand_tensor(r, &sh)], |g, v| g.add(v[0], v[1]))
    });
    for_seeds("sub", |s, r| {
        let sh = rand_shape(r, 2);
        check(s, vec![rand_tensor(r, &sh), rand_tensor(r, &sh)], |g, v| g.sub(v[0], v[1]))
    });
    for_seeds("mul", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh), rand_tensor(r, &sh)], |g, v| g.mul(v[0], v[1]))
    });
    for_seeds("scale", |s, r| {
        let sh = rand_shape(r, 2);
        check(s, vec![rand_tensor(r, &sh)], |g, v| Ok(g.scale(v[0], -1.7)))
    });
}

#[test]
fn grad_activations() {
    for_seeds("sigmoid", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh).map(|x| 3.0 * x)], |g, v| Ok(g.sigmoid(v[0])))
    });
    for_seeds("tanh", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh).map(|x| 2.0 * x)], |g, v| Ok(g.tanh(v[0])))
    });
    for_seeds("swish", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh).map(|x| 3.0 * x)], |g, v| Ok(g.swish(v[0])))
    });
}

#[test]
fn grad_matmul_and_linear() {
    for_seeds("matmul", |s, r| {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        check(s, vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])], |g, v| g.matmul(v[0], v[1]))
    });
    for_seeds("linear", |s, r| {
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        check(s, vec![rand_tensor(r, &[n, i]), rand_tensor(r, &[o, i]), rand_tensor(r, &[o])], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        })
    });
}

#[test]
fn grad_conv2d() {
    for_seeds("conv2d", |s, r| {
        let (c, o, kh, kw) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
        let (stride, ph, pw) = (r.gen_range(1..=2), r.gen_range(0..=1), r.gen_range(0..=1));
        let (h, w) = (r.gen_range(kh.max(2)..=4), r.gen_range(kw.max(2)..=4));
        check(
            s,
            vec![rand_tensor(r, &[c, h, w]), rand_tensor(r, &[o, c, kh, kw]), rand_tensor(r, &[o])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, (ph, pw)),
        )
    });
    for_seeds("conv2d 1x1", |s, r| {
        let (c, o) = (r.gen_range(1..=4), r.gen_range(1..=4));
        check(s, vec![rand_tensor(r, &[c, 3, 2]), rand_tensor(r, &[o, c, 1, 1])], |g, v| {
            g.conv2d(v[0], v[1], None, 1, (0, 0))
        })
    });
}

#[test]
fn grad_softmax_layer_norm() {
    for_seeds("softmax", |s, r| {
        let sh = rand_shape(r, 2);
        check(s, vec![rand_tensor(r, &sh).map(|x| 2.0 * x)], |g, v| Ok(g.softmax(v[0])))
    });
    for_seeds("layer_norm", |s, r| {
        let (n, d) = (r.gen_range(1..=4), r.gen_range(2..=4));
        check(s, vec![rand_tensor(r, &[n, d]), rand_tensor(r, &[d]), rand_tensor(r, &[d])], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        })
    });
}

#[test]
fn grad_reductions_and_layout() {
    for_seeds("mean", |s, r| {
        let sh = rand_shape(r, 3);
        let axis = r.gen_range(0..3);
        check(s, vec![rand_tensor(r, &sh)], |g, v| g.mean(v[0], axis))
    });
    for_seeds("sum", |s, r| {
        let sh = rand_shape(r, 2);
        check(s, vec![rand_tensor(r, &sh)], |g, v| Ok(g.sum(v[0])))
    });
    for_seeds("concat", |s, r| {
        let mut sh = rand_shape(r, 3);
        let axis = r.gen_range(0..3);
        let a = rand_tensor(r, &sh);
        sh[axis] = r.gen_range(1..=4);
        let b = rand_tensor(r, &sh);
        check(s, vec![a, b], |g, v| g.concat(v, axis))
    });
    for_seeds("slice", |s, r| {
        let sh = rand_shape(r, 3);
        let axis = r.gen_range(0..3);
        let start = r.gen_range(0..sh[axis]);
        let end = r.gen_range(start + 1..=sh[axis]);
        check(s, vec![rand_tensor(r, &sh)], |g, v| g.slice(v[0], axis, start, end))
    });
    for_seeds("hflip", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh)], |g, v| Ok(g.hflip(v[0])))
    });
    for_seeds("reshape+transpose", |s, r| {
        let sh = rand_shape(r, 2);
        check(s, vec![rand_tensor(r, &sh)], |g, v| {
            let t = g.transpose(v[0])?;
            g.reshape(t, &[sh[0] * sh[1]])
        })
    });
    for_seeds("scale_channels", |s, r| {
        let sh = rand_shape(r, 3);
        check(s, vec![rand_tensor(r, &sh), rand_tensor(r, &[sh[0]])], |g, v| g.scale_channels(v[0], v[1]))
    });
}

#[test]
fn grad_gru_scan() {
    for_seeds("gru_scan", |s, r| {
        let (steps, h) = (r.gen_range(1..=4), r.gen_range(1..=4));
        check(
            s,
            vec![
                rand_tensor(r, &[steps, 3 * h]),
                rand_tensor(r, &[h]),
                rand_tensor(r, &[3 * h, h]),
                rand_tensor(r, &[3 * h]),
            ],
            |g, v| g.gru_scan(v[0], v[1], v[2], v[3]),
        )
    });
}

#[test]
fn fault_injection_is_caught() {
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
    let report = grad_check(
        &mut params,
        |g| {
            g.inject_fault(Some(OpKind::Sigmoid));
            let v = g.param(w);
            let s = g.sigmoid(v);
            Ok(g.sum(s))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() > 1e-2);
}
