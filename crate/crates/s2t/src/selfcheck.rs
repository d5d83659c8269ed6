//! Verification rows for the networks and the digital baseline chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross_core::nnblocks::ParamDecl;
use ross_core::selfcheck::{param_row, perturbed, project, CheckRow, SuiteOptions};
use ross_core::{Tape, Tensor};

use crate::eval::{hamming_decode, hamming_encode, qam16_demodulate, qam16_modulate, Quantizer};
use crate::txmodels::{ModelConfig, Net, Networks};

fn with_inputs(decls: Vec<ParamDecl>, inputs: Vec<(&'static str, Vec<usize>, f64, f64)>, seed: u64) -> impl Fn(u64) -> ross_core::nnblocks::ParamStore {
    move |round: u64| {
        let s = seed.wrapping_add(round.wrapping_mul(0x9e37_79b9));
        let mut store = perturbed(&decls, s);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x7a3);
        for (name, shape, lo, hi) in &inputs {
            let t = Tensor::from_fn(shape.clone(), |_| rng.random_range(*lo..*hi));
            store.insert(*name, t).expect("input name is unique");
        }
        store
    }
}

/// Step for whole networks; round-off in the deep objectives swamps the
/// smallest gradients at the default step.
pub const NETWORK_EPS: f64 = 1e-4;

/// Parameter and input gradients of every network against central
/// differences at [`NETWORK_EPS`].
pub fn network_checks(cfg: &ModelConfig, opts: &SuiteOptions) -> Vec<CheckRow> {
    let opts = &SuiteOptions { eps: NETWORK_EPS, ..*opts };
    let nets = match Networks::new(cfg) {
        Ok(n) => n,
        Err(e) => {
            let mut row = CheckRow::new("network", "config");
            row.fail(e.to_string());
            return vec![row];
        }
    };
    let s = opts.seed;
    let (l, w, inter) = (cfg.max_target_len, cfg.feature_width, cfg.intermediate_width);
    let frames = vec![cfg.frames_per_token * 5, cfg.frame_dim];
    let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x70c);
    let tokens: Vec<usize> = (0..7).map(|_| rng.random_range(3..cfg.tgt_vocab)).collect();
    let probe: Vec<bool> = (0..l).map(|i| i % 3 != 1).collect();
    let mut rows = Vec::new();

    let d = nets.decls(Net::Encoder);
    rows.push(param_row("network", "semantic_encoder", opts, with_inputs(d, vec![("x", frames.clone(), -1.0, 1.0)], s), |t: &mut Tape, b| {
        let y = nets.encoder.forward(t, b, b.get("x")?).map_err(to_nn)?;
        project(t, y, s)
    }));

    let d = nets.decls(Net::ChannelEncoder);
    rows.push(param_row("network", "channel_encoder", opts, with_inputs(d, vec![("x", vec![l, w], -1.0, 1.0)], s), |t, b| {
        let y = nets.chenc.forward(t, b, b.get("x")?).map_err(to_nn)?;
        project(t, y, s)
    }));

    let d = nets.decls(Net::ChannelDecoder);
    rows.push(param_row("network", "channel_decoder", opts, with_inputs(d, vec![("y", vec![l, cfg.symbol_width], -1.0, 1.0)], s), |t, b| {
        let y = nets.chdec.forward(t, b, b.get("y")?).map_err(to_nn)?;
        project(t, y, s)
    }));

    let d = nets.decls(Net::Decoder);
    rows.push(param_row("network", "semantic_decoder", opts, with_inputs(d, vec![("m", vec![l, w], -1.0, 1.0)], s), |t, b| {
        let y = nets.decoder.forward(t, b, b.get("m")?, &tokens).map_err(to_nn)?;
        project(t, y, s)
    }));

    let d = nets.decls(Net::Generator);
    rows.push(param_row("network", "generator", opts, with_inputs(d, vec![("x", frames.clone(), -1.0, 1.0)], s), |t, b| {
        let (f, i) = nets.generator.forward(t, b, b.get("x")?).map_err(to_nn)?;
        let a = project(t, f, s)?;
        let c = project(t, i, s ^ 1)?;
        Ok(t.add(a, c)?)
    }));

    let d = nets.decls(Net::Discriminator);
    rows.push(param_row("network", "discriminator", opts, with_inputs(d, vec![("f", vec![l, w], -1.0, 1.0)], s), |t, b| {
        Ok(nets.discriminator.forward(t, b, b.get("f")?).map_err(to_nn)?)
    }));

    let d = nets.decls(Net::Probe);
    rows.push(param_row("network", "probe_net", opts, with_inputs(d, vec![("i", vec![l, inter], -1.0, 1.0)], s), |t, b| {
        let y = nets.probe.forward(t, b, b.get("i")?).map_err(to_nn)?;
        project(t, y, s)
    }));

    let d = nets.decls(Net::Compensator);
    rows.push(param_row("network", "compensator", opts, with_inputs(d, vec![("f", vec![l, w], -1.0, 1.0)], s), |t, b| {
        let y = nets.compensator.forward(t, b, b.get("f")?, &probe).map_err(to_nn)?;
        project(t, y, s)
    }));
    rows
}

fn to_nn(e: crate::txmodels::ModelError) -> ross_core::nnblocks::NnError {
    match e {
        crate::txmodels::ModelError::Nn(n) => n,
        crate::txmodels::ModelError::Autodiff(a) => a.into(),
        other => ross_core::nnblocks::NnError::from(ross_core::AutodiffError::Invalid {
            op: ross_core::OpKind::Sum,
            msg: other.to_string(),
        }),
    }
}

/// Oracles for the quantiser, Hamming(7,4) and 16-QAM.
pub fn digital_checks() -> Vec<CheckRow> {
    let mut rows = Vec::new();

    let mut row = CheckRow::new("digital", "hamming74_single_flip");
    for n in 0u8..16 {
        let d = [(n >> 3) & 1, (n >> 2) & 1, (n >> 1) & 1, n & 1];
        let c = hamming_encode(d);
        if hamming_decode(c) != d {
            row.fail(format!("clean codeword of {n} decoded wrongly"));
        }
        for k in 0..7 {
            let mut bad = c;
            bad[k] ^= 1;
            if hamming_decode(bad) != d {
                row.fail(format!("flip of bit {k} in codeword of {n} not corrected"));
            }
            row.points += 1;
        }
    }
    rows.push(row);

    let mut row = CheckRow::new("digital", "qam16_round_trip");
    let bits: Vec<u8> = (0u16..256).flat_map(|v| (0..8).map(move |k| ((v >> k) & 1) as u8)).collect();
    let sym = qam16_modulate(&bits);
    let power = sym.iter().map(|s| s.norm_sqr()).sum::<f64>() / sym.len() as f64;
    row.points = sym.len();
    row.max_rel_err = (power - 1.0).abs();
    if qam16_demodulate(&sym) != bits {
        row.fail("demodulated bits differ");
    }
    if row.max_rel_err > 1e-12 {
        row.fail(format!("mean power {power}"));
    }
    rows.push(row);

    let mut row = CheckRow::new("digital", "quantizer_bound");
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7);
    let v: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
    let q = Quantizer::fit(&v);
    for &x in &v {
        let e = (q.dequantize(q.quantize(x)) - x).abs();
        row.max_rel_err = row.max_rel_err.max(e / q.step());
        row.points += 1;
    }
    if row.max_rel_err > 0.5 + 1e-9 {
        row.fail(format!("error {:.4} steps", row.max_rel_err));
    }
    rows.push(row);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digital_rows_pass() {
        for r in digital_checks() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
