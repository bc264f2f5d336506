//! Finite-difference gradient checking.
//!
//! Central differences are the independent oracle for every analytic
//! gradient in the engine; the per-op suite here is reused by both the
//! test suite and the `gradcheck` CLI command.

use super::nn::{self, Bindings, MhaVars};
use super::params::{GradTable, ParamTable};
use super::tape::Tape;
use super::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative error |a - n| / max(1, |a|, |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Which coordinates to probe with finite differences.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    All,
    /// At most this many seeded coordinates per tensor.
    Sample { per_tensor: usize, seed: u64 },
}

/// Compare analytic gradients against central finite differences of
/// `loss` and return the max relative error over probed coordinates.
pub fn grad_check<F>(
    loss: F,
    params: &ParamTable<f64>,
    analytic: &GradTable<f64>,
    eps: f64,
    selection: CoordSelection,
) -> f64
where
    F: Fn(&ParamTable<f64>) -> f64,
{
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (id, name, tensor) in params.iter() {
        let coords: Vec<usize> = match selection {
            CoordSelection::All => (0..tensor.numel()).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                let mut rng = nn::param_rng(seed, name);
                let n = tensor.numel();
                (0..per_tensor.min(n)).map(|_| rng.gen_range(0..n)).collect()
            }
        };
        for c in coords {
            let orig = tensor.data()[c];
            work.get_mut(id).data_mut()[c] = orig + eps;
            let up = loss(&work);
            work.get_mut(id).data_mut()[c] = orig - eps;
            let down = loss(&work);
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map(|g| g.data()[c]).unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

/// Evaluate loss and analytic gradients for a tape-building closure.
pub fn value_and_grad<B>(params: &ParamTable<f64>, build: B) -> (f64, GradTable<f64>)
where
    B: Fn(&mut Tape<f64>, &Bindings) -> super::tape::Var,
{
    let mut tape = Tape::new();
    let binds = Bindings::bind_all(&mut tape, params);
    let loss = build(&mut tape, &binds);
    let value = tape.value(loss).scalar_value();
    tape.backward(loss).expect("scalar loss");
    let mut grads = GradTable::zeros_like(params);
    tape.grads_into(&mut grads);
    (value, grads)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Run the op check named `name` for one seed: build random inputs,
/// reduce the op output with a fixed random linear functional, and
/// compare analytic vs numeric gradients over every input coordinate.
fn check_one<B>(params: ParamTable<f64>, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &Bindings) -> super::tape::Var,
{
    let (_, analytic) = value_and_grad(&params, &build);
    grad_check(
        |p| {
            let mut tape = Tape::new();
            let binds = Bindings::bind_all(&mut tape, p);
            let loss = build(&mut tape, &binds);
            tape.value(loss).scalar_value()
        },
        &params,
        &analytic,
        1e-4,
        CoordSelection::All,
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Gradient checks for every differentiable primitive and the attention
/// composite, each over `seeds` random draws. Returns per-op worst-case
/// relative errors.
pub fn op_checks(base_seed: u64, seeds: u64) -> Vec<OpCheck> {
    let mut results: Vec<OpCheck> = Vec::new();
    let mut record = |name: &'static str, err: f64| {
        results.push(OpCheck { name, max_rel_err: err });
    };

    let worst = |name: &'static str, f: &dyn Fn(&mut ChaCha8Rng) -> f64| {
        let mut w = 0.0f64;
        for s in 0..seeds {
            let mut rng = nn::param_rng(base_seed.wrapping_add(s), name);
            w = w.max(f(&mut rng));
        }
        w
    };

    let e = worst("add", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[3, 4], -2.0, 2.0));
        p.insert("b", rand_tensor(rng, &[3, 4], -2.0, 2.0));
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.add(binds.var(0), binds.var(1)).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("add", e);

    let e = worst("sub_neg_scale", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[2, 5], -2.0, 2.0));
        p.insert("b", rand_tensor(rng, &[2, 5], -2.0, 2.0));
        let w = rand_tensor(rng, &[2, 5], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let d = t.sub(binds.var(0), binds.var(1)).unwrap();
            let n = t.neg(d);
            let s = t.scale(n, 0.7);
            let wv = t.constant(w.clone());
            let y = t.mul(s, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("sub_neg_scale", e);

    let e = worst("mul", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[3, 3], -2.0, 2.0));
        p.insert("b", rand_tensor(rng, &[3, 3], -2.0, 2.0));
        check_one(p, move |t, binds| {
            let y = t.mul(binds.var(0), binds.var(1)).unwrap();
            t.sum_all(y)
        })
    });
    record("mul", e);

    let e = worst("add_row", &|rng| {
        let mut p = ParamTable::new();
        p.insert("x", rand_tensor(rng, &[4, 3], -2.0, 2.0));
        p.insert("b", rand_tensor(rng, &[1, 3], -2.0, 2.0));
        let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.add_row(binds.var(0), binds.var(1)).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("add_row", e);

    let e = worst("matmul", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[3, 4], -1.5, 1.5));
        p.insert("b", rand_tensor(rng, &[4, 2], -1.5, 1.5));
        let w = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.matmul(binds.var(0), binds.var(1)).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("matmul", e);

    let e = worst("transpose", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[3, 5], -2.0, 2.0));
        let w = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.transpose(binds.var(0));
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("transpose", e);

    // keep inputs away from the kink at 0 where the subgradient is used
    let e = worst("relu", &|rng| {
        let mut p = ParamTable::new();
        let mut x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        p.insert("x", x);
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.relu(binds.var(0));
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("relu", e);

    for (name, axis) in [("softmax_rows", 1usize), ("softmax_cols", 0usize)] {
        let e = worst(name, &|rng| {
            let mut p = ParamTable::new();
            p.insert("x", rand_tensor(rng, &[3, 4], -3.0, 3.0));
            let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            check_one(p, move |t, binds| {
                let y = t.softmax(binds.var(0), axis).unwrap();
                let wv = t.constant(w.clone());
                let y = t.mul(y, wv).unwrap();
                t.sum_all(y)
            })
        });
        record(name, e);
    }

    let e = worst("layer_norm", &|rng| {
        let mut p = ParamTable::new();
        p.insert("x", rand_tensor(rng, &[3, 6], -2.0, 2.0));
        p.insert("gamma", rand_tensor(rng, &[1, 6], 0.5, 1.5));
        p.insert("beta", rand_tensor(rng, &[1, 6], -0.5, 0.5));
        let w = rand_tensor(rng, &[3, 6], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t
                .layer_norm(binds.var(0), binds.var(1), binds.var(2), 1e-5)
                .unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("layer_norm", e);

    let e = worst("concat_slice", &|rng| {
        let mut p = ParamTable::new();
        p.insert("a", rand_tensor(rng, &[2, 3], -2.0, 2.0));
        p.insert("b", rand_tensor(rng, &[2, 2], -2.0, 2.0));
        p.insert("c", rand_tensor(rng, &[1, 5], -2.0, 2.0));
        let w = rand_tensor(rng, &[3, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let cc = t.concat_cols(&[binds.var(0), binds.var(1)]).unwrap();
            let cr = t.concat_rows(&[cc, binds.var(2)]).unwrap();
            let s = t.slice_cols(cr, 1, 3).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(s, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("concat_slice", e);

    let e = worst("row_select_repeat", &|rng| {
        let mut p = ParamTable::new();
        p.insert("x", rand_tensor(rng, &[4, 3], -2.0, 2.0));
        let w = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let r = t.row_select(binds.var(0), 2).unwrap();
            let rep = t.repeat_row(r, 5).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(rep, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("row_select_repeat", e);

    let e = worst("max_pool_rows", &|rng| {
        let mut p = ParamTable::new();
        // well-separated values keep the argmax stable under +-eps
        let mut x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += (i % 7) as f64 * 0.05;
        }
        p.insert("x", x);
        let w = rand_tensor(rng, &[1, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.max_pool_rows(binds.var(0)).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("max_pool_rows", e);

    let e = worst("mean_pool_rows", &|rng| {
        let mut p = ParamTable::new();
        p.insert("x", rand_tensor(rng, &[4, 3], -2.0, 2.0));
        let w = rand_tensor(rng, &[1, 3], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let y = t.mean_pool_rows(binds.var(0)).unwrap();
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv).unwrap();
            t.sum_all(y)
        })
    });
    record("mean_pool_rows", e);

    let e = worst("conv1d", &|rng| {
        let mut p = ParamTable::new();
        p.insert("x", rand_tensor(rng, &[7, 3], -2.0, 2.0));
        p.insert("w", rand_tensor(rng, &[9, 4], -1.0, 1.0));
        p.insert("b", rand_tensor(rng, &[1, 4], -0.5, 0.5));
        check_one(p, move |t, binds| {
            let y = t
                .conv1d(binds.var(0), binds.var(1), binds.var(2), 3, 2, 1)
                .unwrap();
            t.sum_all(y)
        })
    });
    record("conv1d", e);

    let e = worst("smooth_l1_masked", &|rng| {
        let mut p = ParamTable::new();
        // straddle the quadratic/linear switch at |d| = 1
        p.insert("pred", rand_tensor(rng, &[1, 8], -3.0, 3.0));
        let target = rand_tensor(rng, &[1, 8], -1.0, 1.0);
        let mask = vec![true, false, true, true];
        check_one(p, move |t, binds| {
            t.smooth_l1_masked(binds.var(0), target.clone(), mask.clone())
                .unwrap()
        })
    });
    record("smooth_l1_masked", e);

    let e = worst("cross_entropy_logits", &|rng| {
        let mut p = ParamTable::new();
        p.insert("logits", rand_tensor(rng, &[1, 6], -2.0, 2.0));
        check_one(p, move |t, binds| {
            t.cross_entropy_logits(binds.var(0), 2).unwrap()
        })
    });
    record("cross_entropy_logits", e);

    let e = worst("multi_head_attention", &|rng| {
        let mut p = ParamTable::new();
        p.insert("q", rand_tensor(rng, &[1, 8], -1.0, 1.0));
        p.insert("kv", rand_tensor(rng, &[4, 8], -1.0, 1.0));
        p.insert("wq", rand_tensor(rng, &[8, 8], -0.5, 0.5));
        p.insert("wk", rand_tensor(rng, &[8, 8], -0.5, 0.5));
        p.insert("wv", rand_tensor(rng, &[8, 8], -0.5, 0.5));
        p.insert("wo", rand_tensor(rng, &[8, 8], -0.5, 0.5));
        let w = rand_tensor(rng, &[1, 8], -1.0, 1.0);
        check_one(p, move |t, binds| {
            let params = MhaVars {
                wq: binds.var(2),
                wk: binds.var(3),
                wv: binds.var(4),
                wo: binds.var(5),
            };
            let (y, _) =
                nn::multi_head_attention(t, binds.var(0), binds.var(1), binds.var(1), &params, 2)
                    .unwrap();
            let wv2 = t.constant(w.clone());
            let y = t.mul(y, wv2).unwrap();
            t.sum_all(y)
        })
    });
    record("multi_head_attention", e);

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_hand_value() {
        let mut p = ParamTable::new();
        p.insert("x", Tensor::scalar(3.0));
        let build = |t: &mut Tape<f64>, binds: &Bindings| {
            let x = binds.var(0);
            let y = t.mul(x, x).unwrap();
            t.sum_all(y)
        };
        let (v, g) = value_and_grad(&p, build);
        assert!((v - 9.0).abs() < 1e-12);
        let a = g.get(0).unwrap().scalar_value();
        assert!((a - 6.0).abs() < 1e-12);
        let err = grad_check(
            |p| {
                let mut t = Tape::new();
                let binds = Bindings::bind_all(&mut t, p);
                let l = build(&mut t, &binds);
                t.value(l).scalar_value()
            },
            &p,
            &g,
            1e-4,
            CoordSelection::All,
        );
        assert!(err < 1e-9, "{err}");
    }

    /// Every primitive passes at 64-bit with eps = 1e-4 over 20 seeds.
    #[test]
    fn all_ops_pass_grad_check() {
        for check in op_checks(1234, 20) {
            assert!(
                check.max_rel_err <= 1e-5,
                "{} failed grad check: {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    /// Negative control: a deliberately wrong gradient is caught.
    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamTable::new();
        p.insert("x", Tensor::scalar(2.0));
        let build = |t: &mut Tape<f64>, binds: &Bindings| {
            let x = binds.var(0);
            let y = t.mul(x, x).unwrap();
            t.sum_all(y)
        };
        let (_, mut g) = value_and_grad(&p, build);
        // corrupt the analytic gradient
        g.get(0).unwrap();
        let wrong = Tensor::scalar(1.0);
        let mut bad = GradTable::zeros_like(&p);
        bad.accumulate(0, &wrong);
        let err = grad_check(
            |p| {
                let mut t = Tape::new();
                let binds = Bindings::bind_all(&mut t, p);
                let l = build(&mut t, &binds);
                t.value(l).scalar_value()
            },
            &p,
            &bad,
            1e-4,
            CoordSelection::All,
        );
        assert!(err > 0.5, "wrong gradient not flagged: {err}");
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut p = ParamTable::<f64>::new();
        p.insert("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &p);
        let x = binds.var(0);
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        let g1 = tape.grad(x).unwrap().scalar_value();
        tape.backward(l).unwrap();
        let g2 = tape.grad(x).unwrap().scalar_value();
        assert!((g1 - 6.0).abs() < 1e-9, "{g1}");
        assert!((g2 - 12.0).abs() < 1e-9, "{g2}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), None);
        assert!(matches!(
            tape.backward(x),
            Err(super::super::tape::TensorError::NonScalarLoss(_))
        ));
    }
}
