use proptest::prelude::*;
use ross_core::losses::{lsr_ce, probe_comp_loss, probe_net_loss, LossConfig, SmoothingRule, EOS};
use ross_core::{Tape, Tensor};

fn dist(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |mut d| {
        for r in d.chunks_mut(cols) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new([rows, cols], d).unwrap()
    })
}

fn target(rows: usize, vocab: usize) -> impl Strategy<Value = Vec<usize>> {
    (prop::collection::vec(3..vocab, rows), 1..=rows).prop_map(move |(mut t, n)| {
        t[n - 1] = EOS;
        for v in t.iter_mut().skip(n) {
            *v = 0;
        }
        t
    })
}

fn ce(p: &Tensor, t: &[usize]) -> f64 {
    let valid = ross_core::losses::valid_positions(t);
    let n = valid.iter().filter(|&&v| v).count() as f64;
    (0..t.len()).filter(|&i| valid[i]).map(|i| -p.at2(i, t[i]).ln()).sum::<f64>() / n
}

fn eval(cfg: LossConfig, p: &Tensor, t: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(p.clone());
    let out = lsr_ce(&mut tape, v, t, &cfg).unwrap();
    tape.value(out.loss).item()
}

proptest! {
    #[test]
    fn smoothing_rules_bracket_plain_ce(p in dist(5, 6), t in target(5, 6)) {
        let base = ce(&p, &t);
        let std1 = eval(LossConfig { kappa: 1.0, smoothing: SmoothingRule::Standard, ..LossConfig::default() }, &p, &t);
        let lit1 = eval(LossConfig { kappa: 1.0, smoothing: SmoothingRule::Literal, ..LossConfig::default() }, &p, &t);
        prop_assert!((std1 - base).abs() <= 1e-12);
        prop_assert!(lit1 >= base);
        prop_assert!(eval(LossConfig::default(), &p, &t) >= 0.0);
    }

    #[test]
    fn probe_comp_monotone_in_support(p in dist(6, 5), t in target(6, 5), probe in prop::collection::vec(any::<bool>(), 6), extra in 0usize..6) {
        let eval = |c: &[bool]| {
            let mut tape = Tape::new();
            let v = tape.constant(p.clone());
            let out = probe_comp_loss(&mut tape, v, &t, c).unwrap();
            tape.value(out.loss).item()
        };
        let mut wider = probe.clone();
        wider[extra] = true;
        let (a, b) = (eval(&probe), eval(&wider));
        prop_assert!(a >= 0.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn probe_net_nonnegative_and_zero_at_identity(v in prop::collection::vec(0.0f64..3.0, 1..10)) {
        let n = v.len();
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::new([n], v.clone()).unwrap());
        let ones = tape.constant(Tensor::full([n], 1.0));
        let l = probe_net_loss(&mut tape, i, i, ones).unwrap();
        prop_assert_eq!(tape.value(l).item(), 0.0);
        let zero = tape.constant(Tensor::zeros([n]));
        let l0 = probe_net_loss(&mut tape, i, zero, ones).unwrap();
        let sq: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((tape.value(l0).item() - sq).abs() <= 1e-12);
    }
}
