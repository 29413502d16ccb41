use add_core::autodiff::{Tape, Var};
use add_core::gradcheck::finite_difference_check;
use add_core::{Result, Tensor};
use proptest::prelude::*;

fn tensor(n: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::feature(1, 2, n / 2, v).unwrap())
}

fn f(tape: &mut Tape, x: Var, c: &Tensor) -> Result<Var> {
    let c = tape.constant(c.clone());
    let m = tape.mul(x, c)?;
    let e = tape.exp(m);
    Ok(tape.sum(e))
}

fn g(tape: &mut Tape, x: Var) -> Var {
    let s = tape.square(x);
    let r = tape.relu(s);
    tape.frobenius_norm_sq(r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(x in tensor(8), c in tensor(8), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |build: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let root = build(&mut tape, v).unwrap();
            tape.backward(root).unwrap().wrt(v)
        };
        let gf = grad(&|t, v| f(t, v, &c));
        let gg = grad(&|t, v| Ok(g(t, v)));
        let combined = grad(&|t, v| {
            let fv = f(t, v, &c)?;
            let gv = g(t, v);
            let fa = t.scale(fv, a);
            let gb = t.scale(gv, b);
            t.add(fa, gb)
        });
        for i in 0..x.len() {
            let want = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn replay_is_bitwise_identical(x in tensor(8), c in tensor(8)) {
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let fv = f(&mut tape, v, &c).unwrap();
            let gv = g(&mut tape, v);
            let root = tape.add(fv, gv).unwrap();
            let grads = tape.backward(root).unwrap();
            let again = tape.backward(root).unwrap();
            assert_eq!(grads.wrt(v), again.wrt(v));
            grads.wrt(v)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn primitives_match_finite_differences(x in tensor(8), c in tensor(8)) {
        // Keep clear of the relu kink where central differences are meaningless.
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        let report = finite_difference_check(|t, v| {
            let fv = f(t, v, &c)?;
            let r = t.relu(v);
            let rs = t.sum(r);
            let gv = g(t, v);
            let s = t.add(fv, gv)?;
            t.add(s, rs)
        }, &x, 1e-5).unwrap();
        prop_assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn finite_inputs_stay_finite(x in tensor(16), c in tensor(16)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let root = f(&mut tape, v, &c).unwrap();
        let gv = g(&mut tape, v);
        let root = tape.add(root, gv).unwrap();
        prop_assert!(tape.value(root).all_finite());
        prop_assert!(tape.backward(root).unwrap().wrt(v).all_finite());
    }
}
