use std::rc::Rc;

use proptest::prelude::*;

use super::*;
use crate::error::Result;
use crate::rng::Rng;

fn rand_vec(rng: &mut Rng, n: usize, mag: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-mag, mag)).collect()
}

/// Contracts `y` against a fixed random weight so every output coordinate matters.
fn weighted_sum<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = Rng::new(seed);
    let w = tape.constant(&y.shape(), rand_vec(&mut rng, y.numel(), 1.0))?;
    Ok(y.mul(w)?.sum())
}

fn assert_grad<F>(f: F, shape: &[usize], data: Vec<f64>, tol: f64)
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let x = DiffArray::new(shape.to_vec(), data).unwrap();
    let r = check_gradient(f, &x, 1e-5).unwrap();
    assert!(
        r.max_rel_error < tol,
        "rel err {} at {} (analytic {} numeric {})",
        r.max_rel_error,
        r.worst_index,
        r.analytic[r.worst_index],
        r.numeric[r.worst_index]
    );
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let x = tape.constant(&[2, 2], vec![5.0, -1.0, 2.5, 7.0]).unwrap();
    let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(eye.matmul(x).unwrap().values(), x.values());

    let z = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let x3 = tape.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let p = z.matmul(x3).unwrap();
    assert_eq!(p.shape(), vec![2, 2]);
    assert_eq!(p.values(), vec![0.0; 4]);

    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = tape.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(a.matmul(ones).unwrap().values(), vec![3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(a.matmul(b), Err(crate::Error::Dimension(_))));
}

#[test]
fn cosine_examples() {
    let tape = Tape::new();
    let v = |d: Vec<f64>| tape.constant(&[2], d).unwrap();
    assert_eq!(v(vec![1.0, 0.0]).cosine_sim(v(vec![1.0, 0.0])).unwrap().item(), 1.0);
    assert_eq!(v(vec![1.0, 0.0]).cosine_sim(v(vec![0.0, 1.0])).unwrap().item(), 0.0);
    let c = v(vec![1.0, 1.0]).cosine_sim(v(vec![1.0, 0.0])).unwrap().item();
    assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

#[test]
fn cosine_of_zero_vector_is_finite_and_flagged() {
    let tape = Tape::new();
    let z = tape.variable(&[3], vec![0.0; 3]).unwrap();
    let u = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = z.cosine_sim(u).unwrap();
    assert_eq!(c.item(), 0.0);
    assert_eq!(tape.degenerate_norms(), 1);
    let g = tape.backward(c).unwrap();
    assert!(g.get(z).unwrap().iter().all(|v: &f64| v.is_finite()));
}

#[test]
fn gradcheck_linear_function() {
    let mut rng = Rng::new(1);
    let x = DiffArray::new(vec![7], rand_vec(&mut rng, 7, 10.0)).unwrap();
    let r = check_gradient(|_, x| Ok(x.sum()), &x, 1e-5).unwrap();
    assert!(r.analytic.iter().all(|&g| g == 1.0));
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_rejects_non_scalar() {
    let x = DiffArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let err = check_gradient(|_, x| Ok(x.relu()), &x, 1e-5).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
    let err = check_gradient(|_, x| Ok(x.sum()), &x, 0.0).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn gradcheck_cosine_against_fixed_vector() {
    let mut rng = Rng::new(2);
    for seed in 0..10 {
        let v = rand_vec(&mut rng, 6, 10.0);
        let x = rand_vec(&mut rng, 6, 10.0);
        assert_grad(
            move |t, x| {
                let v = t.constant(&[6], v.clone())?;
                x.cosine_sim(v)
            },
            &[6],
            x,
            1e-6,
        );
        let _ = seed;
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    for seed in 0..5u64 {
        let x = rand_vec(&mut rng, 12, 10.0);
        let other = rand_vec(&mut rng, 12, 10.0);
        let nonzero: Vec<f64> = other.iter().map(|v| v.signum() * (v.abs() + 1.0)).collect();

        let cases: Vec<(&str, Vec<f64>, Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>>)> = vec![
            ("add", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| weighted_sum(t, x.add(t.constant(&[3, 4], o.clone())?)?, seed))
            }),
            ("sub", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| weighted_sum(t, t.constant(&[3, 4], o.clone())?.sub(x)?, seed))
            }),
            ("mul", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| weighted_sum(t, x.mul(t.constant(&[3, 4], o.clone())?)?, seed))
            }),
            ("mul_self", x.clone(), Box::new(move |t, x| weighted_sum(t, x.mul(x)?, seed))),
            ("div", x.clone(), {
                let o = nonzero.clone();
                Box::new(move |t, x| weighted_sum(t, x.div(t.constant(&[3, 4], o.clone())?)?, seed))
            }),
            ("div_denominator", nonzero.clone(), {
                let o = x.clone();
                Box::new(move |t, x| weighted_sum(t, t.constant(&[3, 4], o.clone())?.div(x)?, seed))
            }),
            ("bcast_row", x.clone(), Box::new(move |t, x| {
                let b = t.constant(&[4], vec![1.0, -2.0, 0.5, 3.0])?;
                weighted_sum(t, x.mul(b)?, seed)
            })),
            ("bcast_col_grad", x[..3].to_vec(), Box::new(move |t, x| {
                let col = x.reshape(&[3, 1])?;
                let m = t.constant(&[3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect())?;
                weighted_sum(t, m.mul(col)?, seed)
            })),
            ("scale_offset_neg", x.clone(), Box::new(move |t, x| weighted_sum(t, x.scale(-1.7).add_scalar(2.0).neg(), seed))),
            ("mean", x.clone(), Box::new(move |_, x| Ok(x.mul(x)?.mean()))),
            ("sum_axis0", x.clone(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.sum_axis(0)?, seed))),
            ("mean_axis1", x.clone(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.mean_axis(1)?, seed))),
            ("matmul_left", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.matmul(t.constant(&[4, 3], o.clone())?)?, seed))
            }),
            ("matmul_right", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| weighted_sum(t, t.constant(&[3, 4], o.clone())?.matmul(x.reshape(&[4, 3])?)?, seed))
            }),
            ("bmm", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| {
                    let a = x.reshape(&[2, 3, 2])?;
                    let b = t.constant(&[2, 2, 3], o.clone())?;
                    weighted_sum(t, a.bmm(b, false)?.add(b.bmm(a, false)?.sum())?, seed)
                })
            }),
            ("bmm_nt", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| {
                    let a = x.reshape(&[2, 2, 3])?;
                    let b = t.constant(&[2, 2, 3], o.clone())?;
                    weighted_sum(t, a.bmm(b, true)?.add(b.bmm(a, true)?)?.add(a.bmm(a, true)?)?, seed)
                })
            }),
            ("softmax_axis0", x.iter().map(|v| v / 3.0).collect(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.softmax(0)?, seed))),
            ("softmax_axis1", x.iter().map(|v| v / 3.0).collect(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.softmax(1)?, seed))),
            ("l2_normalize", x.clone(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[3, 4])?.l2_normalize(), seed))),
            ("concat", x.clone(), Box::new(move |t, x| {
                let a = x.reshape(&[3, 4])?;
                let c = t.concat(&[a, a.scale(2.0), a.exp().scale(0.01)], 1)?;
                weighted_sum(t, c, seed)
            })),
            ("concat_axis0", x.clone(), Box::new(move |t, x| {
                let a = x.reshape(&[3, 4])?;
                weighted_sum(t, t.concat(&[a.relu(), a], 0)?, seed)
            })),
            ("permute", x.clone(), Box::new(move |t, x| weighted_sum(t, x.reshape(&[2, 3, 2])?.permute(&[2, 0, 1])?, seed))),
            ("gather_pad", x.clone(), Box::new(move |t, x| {
                let idx = Rc::new(vec![3, PAD, 0, 0, 11, 5]);
                weighted_sum(t, x.gather(idx, &[6])?, seed)
            })),
            ("layer_norm", x.clone(), Box::new(move |t, x| {
                let g = t.constant(&[4], vec![1.0, 0.5, -2.0, 1.5])?;
                let b = t.constant(&[4], vec![0.1, 0.2, 0.3, 0.4])?;
                weighted_sum(t, x.reshape(&[3, 4])?.layer_norm(g, b, 1e-5)?, seed)
            })),
            ("batch_norm", x.clone(), Box::new(move |t, x| {
                let g = t.constant(&[4], vec![1.0, 0.5, -2.0, 1.5])?;
                let b = t.constant(&[4], vec![0.1, 0.2, 0.3, 0.4])?;
                weighted_sum(t, x.reshape(&[3, 4])?.batch_norm_train(g, b, 1e-5)?.0, seed)
            })),
            ("batch_norm_eval", x.clone(), Box::new(move |t, x| {
                let g = t.constant(&[4], vec![1.0, 0.5, -2.0, 1.5])?;
                let b = t.constant(&[4], vec![0.1, 0.2, 0.3, 0.4])?;
                weighted_sum(t, x.reshape(&[3, 4])?.batch_norm_eval(g, b, &[0.1, 0.0, -1.0, 2.0], &[1.0, 4.0, 0.5, 2.0], 1e-5)?, seed)
            })),
            ("linear", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| {
                    let w = t.constant(&[4, 3], o.clone())?;
                    let b = t.constant(&[3], vec![0.5, -0.5, 1.0])?;
                    weighted_sum(t, x.reshape(&[3, 4])?.linear(w, Some(b))?, seed)
                })
            }),
            ("conv2d_input", x.clone(), {
                let o = other.clone();
                Box::new(move |t, x| {
                    let w = t.constant(&[2, 2, 1, 3], o[..12].to_vec())?;
                    weighted_sum(t, x.reshape(&[1, 3, 4, 1])?.conv2d(w, None, 1, 1)?, seed)
                })
            }),
            ("conv2d_weight_stride2", x.clone(), {
                let o = other.clone();
                Box::new(move |t, w| {
                    let inp = t.constant(&[1, 4, 3, 1], o.clone())?;
                    let w = w.reshape(&[2, 2, 1, 3])?;
                    weighted_sum(t, inp.conv2d(w, None, 2, 1)?, seed)
                })
            }),
        ];
        for (name, data, f) in cases {
            let shape = if data.len() == 12 { vec![3, 4] } else { vec![data.len()] };
            let x = DiffArray::new(shape, data).unwrap();
            let r = check_gradient(&*f, &x, 1e-5).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(
                r.max_rel_error < 1e-6,
                "{name} (seed {seed}): rel err {} at {} analytic {} numeric {}",
                r.max_rel_error,
                r.worst_index,
                r.analytic[r.worst_index],
                r.numeric[r.worst_index]
            );
        }
    }
}

/// Elementwise maps are checked one output coordinate at a time so the
/// finite-difference rounding error scales with that coordinate alone.
fn check_elementwise(name: &str, data: Vec<f64>, op: fn(Var<'_, f64>) -> Var<'_, f64>) {
    let n = data.len();
    let x = DiffArray::new(vec![n], data).unwrap();
    for i in 0..n {
        let r = check_gradient(
            move |_, x| Ok(op(x).gather(Rc::new(vec![i]), &[1])?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(
            r.max_rel_error < 1e-6,
            "{name}[{i}] at {}: rel err {} analytic {} numeric {}",
            x.data()[i],
            r.max_rel_error,
            r.analytic[r.worst_index],
            r.numeric[r.worst_index]
        );
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    for _ in 0..5 {
        let x = rand_vec(&mut rng, 20, 10.0);
        let pos: Vec<f64> = x.iter().map(|v| v.abs() + 0.5).collect();
        let kinkless: Vec<f64> = x
            .iter()
            .map(|&v| if v.abs() < 0.1 { v + 0.5 } else { v })
            .collect();
        check_elementwise("relu", kinkless, |v| v.relu());
        check_elementwise("gelu", x.clone(), |v| v.gelu());
        check_elementwise("exp", x.clone(), |v| v.exp());
        check_elementwise("log", pos.clone(), |v| v.ln());
        check_elementwise("sqrt", pos, |v| v.sqrt());
    }
}

#[test]
fn stop_gradient_blocks_flow() {
    let tape = Tape::new();
    let x = tape.variable(&[3], vec![1.0, -2.0, 3.0]).unwrap();
    let s = x.stop_gradient();
    assert_eq!(s.values(), x.values());
    let y = x.mul(s).unwrap().sum();
    let g = tape.backward(y).unwrap();
    // d/dx (x * sg(x)) = sg(x)
    assert_eq!(g.get(x).unwrap(), &[1.0, -2.0, 3.0]);

    let tape = Tape::new();
    let x = tape.variable(&[3], vec![1.0, -2.0, 3.0]).unwrap();
    let y = x.stop_gradient().exp().sum();
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = Rng::new(5);
    let tape = Tape::new();
    let x = tape.constant(&[6, 9], rand_vec(&mut rng, 54, 30.0)).unwrap();
    let y = x.softmax(1).unwrap().values();
    for r in y.chunks(9) {
        assert!(r.iter().all(|&v| v > 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn conv2d_matches_direct_definition() {
    let mut rng = Rng::new(8);
    let (b, h, w, cin, k, cout) = (2, 5, 4, 3, 3, 2);
    let xs = rand_vec(&mut rng, b * h * w * cin, 1.0);
    let ws = rand_vec(&mut rng, k * k * cin * cout, 1.0);
    let tape = Tape::new();
    let x = tape.constant(&[b, h, w, cin], xs.clone()).unwrap();
    let wt = tape.constant(&[k, k, cin, cout], ws.clone()).unwrap();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let y = x.conv2d(wt, None, stride, pad).unwrap();
        let s = y.shape();
        let yv = y.values();
        for bi in 0..b {
            for oy in 0..s[1] {
                for ox in 0..s[2] {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += xs[((bi * h + iy as usize) * w + ix as usize) * cin + ci]
                                        * ws[((dy * k + dx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        let got = yv[((bi * s[1] + oy) * s[2] + ox) * cout + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn broadcast_general_case() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = tape.constant(&[4, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let c = a.add(b).unwrap();
    assert_eq!(c.shape(), vec![2, 4, 3]);
    let v = c.values();
    assert_eq!(&v[..6], &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    assert_eq!(&v[21..], &[44.0, 45.0, 46.0]);
    let bad = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
    assert!(a.add(bad).is_err());
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
    assert!(tape.backward(x.relu()).is_err());
}

#[test]
fn reductions_and_matmul_are_reproducible() {
    let run = || {
        let mut rng = Rng::new(77);
        let tape = Tape::new();
        let a = tape.variable(&[8, 5], rand_vec(&mut rng, 40, 3.0)).unwrap();
        let b = tape.constant(&[5, 4], rand_vec(&mut rng, 20, 3.0)).unwrap();
        let y = a.matmul(b).unwrap().softmax(1).unwrap().mean();
        let g = tape.backward(y).unwrap().get_or_zeros(a);
        (y.item().to_bits(), g.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_engine_works() {
    let tape = Tape::<f32>::new();
    let x = tape.variable(&[3], vec![1.0, 2.0, 2.0]).unwrap();
    let n = x.l2_normalize();
    assert_eq!(n.values(), vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 4.0]);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let tape = Tape::new();
        let n = xs.len();
        let y = tape.constant(&[n], xs).unwrap().softmax(0).unwrap().values();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cosine_is_bounded(u in prop::collection::vec(-10.0f64..10.0, 4), v in prop::collection::vec(-10.0f64..10.0, 4)) {
        let tape = Tape::new();
        let c = tape.constant(&[4], u).unwrap().cosine_sim(tape.constant(&[4], v).unwrap()).unwrap().item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn random_primitive_composite_gradient(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = rand_vec(&mut rng, 6, 3.0);
        let w = rand_vec(&mut rng, 6, 1.0);
        let xa = DiffArray::new(vec![6], x).unwrap();
        let r = check_gradient(move |t, x| {
            let w = t.constant(&[2, 3], w.clone())?;
            let h = x.reshape(&[2, 3])?.mul(w)?.gelu().softmax(1)?;
            Ok(h.mul(h)?.sum())
        }, &xa, 1e-5).unwrap();
        // composite of saturating maps: small gradient entries carry ~1e-11 absolute FD noise
        for (a, n) in r.analytic.iter().zip(&r.numeric) {
            prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-9, "{a} vs {n}");
        }
    }
}

/// Unfused reference: per-head split, `q·kᵀ + bias`, softmax, `·v`, merge.
fn attention_reference<'t>(
    t: &'t Tape<f64>,
    q: Var<'t, f64>,
    k: Var<'t, f64>,
    v: Var<'t, f64>,
    bias: Var<'t, f64>,
    heads: usize,
) -> Result<Var<'t, f64>> {
    let s = q.shape();
    let (w, n, c) = (s[0], s[1], s[2]);
    let hd = c / heads;
    let p = bias.shape()[0];
    let split = |x: Var<'t, f64>| -> Result<Var<'t, f64>> {
        x.reshape(&[w, n, heads, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[w * heads, n, hd])
    };
    let scores = split(q)?.bmm(split(k)?, true)?.reshape(&[w / p, p, heads, n, n])?;
    let attn = scores.add(bias)?.softmax(4)?.reshape(&[w * heads, n, n])?;
    let _ = t;
    attn.bmm(split(v)?, false)?
        .reshape(&[w, heads, n, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[w, n, c])
}

#[test]
fn window_attention_matches_unfused_reference() {
    let (w, n, heads, hd, p) = (4, 3, 2, 2, 2);
    let c = heads * hd;
    let mut rng = Rng::new(21);
    let data: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, w * n * c, 1.5)).collect();
    let bias = rand_vec(&mut rng, p * heads * n * n, 1.0);
    let run = |fused: bool| {
        let tape = Tape::new();
        let vars: Vec<_> = data.iter().map(|d| tape.variable(&[w, n, c], d.clone()).unwrap()).collect();
        let b = tape.variable(&[p, heads, n, n], bias.clone()).unwrap();
        let y = if fused {
            vars[0].window_attention(vars[1], vars[2], b, heads).unwrap()
        } else {
            attention_reference(&tape, vars[0], vars[1], vars[2], b, heads).unwrap()
        };
        let l = weighted_sum(&tape, y, 5).unwrap();
        let g = tape.backward(l).unwrap();
        let mut grads: Vec<Vec<f64>> = vars.iter().map(|v| g.get_or_zeros(*v)).collect();
        grads.push(g.get_or_zeros(b));
        (y.values(), grads)
    };
    let (yf, gf) = run(true);
    let (yr, gr) = run(false);
    for (a, b) in yf.iter().zip(&yr) {
        assert!((a - b).abs() < 1e-12);
    }
    for (ga, gb) in gf.iter().zip(&gr) {
        for (a, b) in ga.iter().zip(gb) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn window_attention_gradients_match_finite_differences() {
    let (w, n, heads, hd, p) = (2, 4, 2, 3, 1);
    let c = heads * hd;
    let mut rng = Rng::new(22);
    let data: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, w * n * c, 1.0)).collect();
    let bias = rand_vec(&mut rng, p * heads * n * n, 1.0);
    for slot in 0..4 {
        let (d, b) = (data.clone(), bias.clone());
        let (shape, x0) = if slot == 3 {
            (vec![p, heads, n, n], bias.clone())
        } else {
            (vec![w, n, c], data[slot].clone())
        };
        assert_grad(
            move |t, x| {
                let dims = [w, n, c];
                let get = |i: usize| if i == slot { Ok(x) } else { t.constant(&dims, d[i].clone()) };
                let bv = if slot == 3 { x } else { t.constant(&[p, heads, n, n], b.clone())? };
                let y = get(0)?.window_attention(get(1)?, get(2)?, bv, heads)?;
                weighted_sum(t, y, 9)
            },
            &shape,
            x0,
            1e-6,
        );
    }
}

#[test]
fn window_attention_rejects_bad_shapes() {
    let tape = Tape::new();
    let q = tape.constant(&[3, 2, 4], vec![0.0; 24]).unwrap();
    let b = tape.constant(&[2, 2, 2, 2], vec![0.0; 16]).unwrap();
    // 3 windows cannot cycle through 2 bias periods
    assert!(q.window_attention(q, q, b, 2).is_err());
    let b1 = tape.constant(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
    assert!(q.window_attention(q, q, b1, 3).is_err());
    assert!(q.window_attention(q, q, b1, 2).is_ok());
}
