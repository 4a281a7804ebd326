use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stance_core::autodiff::{grad_check, Axis, GradCheckOptions, ParamId, ParamStore, Tape, Tensor, Var};
use stance_core::Result;

const TOL: f64 = 1e-5;

/// Max relative error of `sum(op(params) ⊙ W)` for a fixed non-uniform `W`.
fn check<F>(shapes: &[(usize, usize)], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), Tensor::uniform(r, c, 1.0, &mut rng), true))
        .collect();
    let report = grad_check(&mut store, GradCheckOptions::default(), |tape: &mut Tape<'_>| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(tape, &vars)?;
        let (r, c) = tape.value(out).shape();
        let w = Tensor::from_vec(r, c, (0..r * c).map(|k| (k as f64 * 0.7 + 0.3).sin()).collect())?;
        let w = tape.constant(w);
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    })
    .unwrap();
    assert_eq!(report.params.len(), shapes.len());
    report.max_rel_error()
}

macro_rules! op_check {
    ($name:ident, $shapes:expr, |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check(&$shapes, 3, |$t: &mut Tape<'_>, $v: &[Var]| $body);
            assert!(err <= TOL, "{}: max relative error {err:e}", stringify!($name));
        }
    };
}

op_check!(grad_matmul, [(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]));
op_check!(grad_add, [(2, 3), (2, 3)], |t, v| t.add(v[0], v[1]));
op_check!(grad_add_row, [(4, 3), (1, 3)], |t, v| t.add_row(v[0], v[1]));
op_check!(grad_mul, [(3, 3), (3, 3)], |t, v| t.mul(v[0], v[1]));
op_check!(grad_scale, [(2, 5)], |t, v| Ok(t.scale(v[0], -2.5)));
op_check!(grad_concat_rows, [(2, 3), (1, 3), (3, 3)], |t, v| t.concat(v, Axis::Rows));
op_check!(grad_concat_cols, [(2, 1), (2, 4)], |t, v| t.concat(v, Axis::Cols));
op_check!(grad_tanh, [(3, 4)], |t, v| Ok(t.tanh(v[0])));
op_check!(grad_sigmoid, [(3, 4)], |t, v| Ok(t.sigmoid(v[0])));
op_check!(grad_relu, [(4, 4)], |t, v| Ok(t.relu(v[0])));
op_check!(grad_max_over_time, [(5, 3)], |t, v| t.max_over_time(v[0]));
op_check!(grad_softmax, [(2, 4)], |t, v| Ok(t.softmax(v[0])));
op_check!(grad_dropout, [(4, 5)], |t, v| t.dropout(v[0], 0.4));
op_check!(grad_slice_cols, [(3, 6)], |t, v| t.slice_cols(v[0], 2, 3));
op_check!(grad_gather_rows, [(4, 3)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
op_check!(grad_row, [(4, 3)], |t, v| t.row(v[0], 1));
op_check!(grad_repeat_rows, [(1, 3)], |t, v| t.repeat_rows(v[0], 4));
op_check!(grad_transpose, [(2, 5)], |t, v| Ok(t.transpose(v[0])));
op_check!(grad_sum, [(3, 2)], |t, v| Ok(t.sum(v[0])));
op_check!(grad_sq_norm, [(3, 2)], |t, v| Ok(t.sq_norm(v[0])));
op_check!(grad_im2col, [(6, 2)], |t, v| t.im2col(v[0], 3));

#[test]
fn grad_cross_entropy() {
    for class in 0..3 {
        let err = check(&[(1, 3)], 8, |t: &mut Tape<'_>, v: &[Var]| {
            let p = t.softmax(v[0]);
            let mut target = Tensor::zeros(1, 3);
            target.set(0, class, 1.0);
            t.cross_entropy(p, target)
        });
        assert!(err <= TOL, "class {class}: {err:e}");
    }
}

#[test]
fn tanh_gradient_matches_closed_form() {
    let mut store = ParamStore::new();
    let x = Tensor::from_vec(1, 3, vec![-0.7, 0.1, 1.3]).unwrap();
    let id = store.add("x", x.clone(), true);
    let mut tape = Tape::new(&store, false, 0);
    let v = tape.param(id);
    let y = tape.tanh(v);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get(id, (1, 3)).unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - (1.0 - xi.tanh().powi(2))).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let n = vals.len();
        let t = Tensor::from_vec(1, n, vals.clone()).unwrap();
        let s = t.softmax_rows();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0 && p.is_finite()));
        let shifted = Tensor::from_vec(1, n, vals.iter().map(|v| v + shift).collect()).unwrap().softmax_rows();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_is_order_preserving(vals in prop::collection::vec(-5.0f64..5.0, 2..8)) {
        let t = Tensor::from_vec(1, vals.len(), vals.clone()).unwrap().softmax_rows();
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                if vals[i] < vals[j] {
                    prop_assert!(t.data()[i] <= t.data()[j]);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_naive(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 12)) {
        let ta = Tensor::from_vec(2, 3, a.clone()).unwrap();
        let tb = Tensor::from_vec(3, 4, b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                prop_assert!((c.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}
