use proptest::prelude::*;
use ross_core::{Tape, Tensor, Var};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

fn f_and_g(t: &mut Tape, x: Var) -> (Var, Var) {
    let s = t.softmax(x).unwrap();
    let f = t.sum(s, Some(0)).unwrap();
    let f = t.square(f).unwrap();
    let f = t.sum(f, None).unwrap();
    let g = t.gelu(x).unwrap();
    let g = t.mul(g, x).unwrap();
    let g = t.mean(g, None).unwrap();
    (f, g)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in mat(4, 7)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v).unwrap();
        for r in 0..4 {
            let row = t.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn backward_is_linear(x in mat(3, 5), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |which: u8| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let (f, g) = f_and_g(&mut t, v);
            let loss = match which {
                0 => f,
                1 => g,
                _ => {
                    let fa = t.scale(f, a).unwrap();
                    let gb = t.scale(g, b).unwrap();
                    t.add(fa, gb).unwrap()
                }
            };
            t.backward(loss).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for i in 0..gf.len() {
            prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn replay_is_bit_identical(x in mat(3, 4), w in mat(4, 2)) {
        let run = || {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.matmul(xv, wv).unwrap();
            let y = t.gelu(y).unwrap();
            let l = t.sum(y, None).unwrap();
            t.backward(l).unwrap();
            (t.value(y).clone(), t.grad_tensor(xv).unwrap(), t.grad_tensor(wv).unwrap())
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
    }

    #[test]
    fn identity_matmul(a in mat(3, 3)) {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(3));
        let av = t.constant(a.clone());
        let y = t.matmul(i, av).unwrap();
        prop_assert!(t.value(y).bit_eq(&a));
    }
}

#[test]
fn f32_tape_runs_the_same_graph() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap());
    let y = t.square(x).unwrap();
    let l = t.sum(y, None).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0f32, 4.0]);
}
