//! Finite-difference verification of every op, block and loss, plus
//! channel statistics.
//!
//! Each row draws `points` random inputs from a seeded stream. Op and loss
//! rows compare every coordinate of every differentiable input; block rows
//! compare `points` coordinates sampled across the block's parameters and
//! its input. Scalar objectives are formed by contracting the output with a
//! fixed random weight tensor so that no gradient is trivially zero.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AutodiffError, OpKind, Tape, Tensor, Var};
use crate::channel::{apply_channel, equalize, ChannelConfig, ChannelKind};
use crate::losses::{self, LossConfig, SmoothingRule, EOS};
use crate::nnblocks::{
    causal_mask, grad_check_params, init_params, Activation, Bindings, Conv1dLayer, Conv2dLayer, DecoderBlock,
    Dense, Embedding, LayerSpec, MultiHeadAttention, NnError, Norm, ParamDecl, ParamStore, TransformerBlock,
};

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub points: usize,
    pub seed: u64,
    /// Op whose reverse rule is deliberately perturbed.
    pub fault: Option<OpKind>,
    /// Central-difference step.
    pub eps: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { points: 100, seed: 0x5eed, fault: None, eps: FD_EPS }
    }
}

/// One line of a verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub group: String,
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckRow {
    pub fn new(group: &str, name: &str) -> Self {
        Self {
            group: group.to_string(),
            name: name.to_string(),
            points: 0,
            max_rel_err: 0.0,
            passed: true,
            detail: String::new(),
        }
    }

    pub fn fail(&mut self, detail: impl Into<String>) {
        self.passed = false;
        if self.detail.is_empty() {
            self.detail = detail.into();
        }
    }

    fn absorb(&mut self, max_rel_err: f64, passed: bool, failure: Option<String>) {
        self.max_rel_err = self.max_rel_err.max(max_rel_err);
        if !passed {
            self.fail(failure.unwrap_or_else(|| format!("relative error {max_rel_err:.3e}")));
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform on `[lo, hi]` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

/// Inputs for one op evaluation; `run` receives them as tape variables.
struct OpCase {
    inputs: Vec<Tensor>,
    run: OpFn,
}

impl OpCase {
    fn new(inputs: Vec<Tensor>, run: impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'static) -> Self {
        Self { inputs, run: Box::new(run) }
    }
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng, i: usize) -> OpCase {
    let alt = i % 2 == 1;
    match kind {
        OpKind::Matmul => {
            OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)], |t, v| {
                t.matmul(v[0], v[1])
            })
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = match (kind, alt) {
                (OpKind::Div, true) => away_from_zero(rng, &[], 0.5, 2.0),
                (OpKind::Div, false) => away_from_zero(rng, &[3, 4], 0.5, 2.0),
                (_, true) => uniform(rng, &[], -1.0, 1.0),
                (_, false) => uniform(rng, &[3, 4], -1.0, 1.0),
            };
            OpCase::new(vec![a, b], move |t, v| match kind {
                OpKind::Add => t.add(v[0], v[1]),
                OpKind::Sub => t.sub(v[0], v[1]),
                OpKind::Mul => t.mul(v[0], v[1]),
                _ => t.div(v[0], v[1]),
            })
        }
        OpKind::Conv1d => {
            let stride = if alt { 2 } else { 1 };
            let inputs = vec![
                uniform(rng, &[7, 3], -1.0, 1.0),
                uniform(rng, &[3, 3, 2], -1.0, 1.0),
                uniform(rng, &[2], -1.0, 1.0),
            ];
            OpCase::new(inputs, move |t, v| t.conv1d(v[0], v[1], Some(v[2]), stride))
        }
        OpKind::Conv2d => {
            let stride = if alt { (2, 2) } else { (1, 1) };
            let inputs = vec![
                uniform(rng, &[2, 5, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ];
            OpCase::new(inputs, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride))
        }
        OpKind::LayerNorm => {
            let inputs =
                vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[5], 0.5, 1.5), uniform(rng, &[5], -0.5, 0.5)];
            OpCase::new(inputs, |t, v| t.layernorm(v[0], v[1], v[2], 1e-5))
        }
        OpKind::Softmax => OpCase::new(vec![uniform(rng, &[3, 5], -2.0, 2.0)], |t, v| t.softmax(v[0])),
        OpKind::Log => OpCase::new(vec![uniform(rng, &[3, 4], 0.5, 2.0)], |t, v| t.log(v[0])),
        OpKind::LogClamped => {
            OpCase::new(vec![uniform(rng, &[3, 4], 0.5, 2.0)], |t, v| t.log_clamped(v[0], 1e-12))
        }
        OpKind::Exp => OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], |t, v| t.exp(v[0])),
        OpKind::Gelu => OpCase::new(vec![uniform(rng, &[3, 4], -3.0, 3.0)], |t, v| t.gelu(v[0])),
        OpKind::Relu => OpCase::new(vec![away_from_zero(rng, &[3, 4], 0.01, 2.0)], |t, v| t.relu(v[0])),
        OpKind::Sigmoid => OpCase::new(vec![uniform(rng, &[3, 4], -3.0, 3.0)], |t, v| t.sigmoid(v[0])),
        OpKind::Square => OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], |t, v| t.square(v[0])),
        OpKind::Gather => {
            let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            OpCase::new(vec![uniform(rng, &[5, 3], -1.0, 1.0)], move |t, v| t.gather(v[0], &ids))
        }
        OpKind::Concat => {
            if alt {
                let inputs = vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
                OpCase::new(inputs, |t, v| t.concat(&[v[0], v[1]], 1))
            } else {
                let inputs = vec![
                    uniform(rng, &[2, 3], -1.0, 1.0),
                    uniform(rng, &[1, 3], -1.0, 1.0),
                    uniform(rng, &[3, 3], -1.0, 1.0),
                ];
                OpCase::new(inputs, |t, v| t.concat(&[v[0], v[1], v[2]], 0))
            }
        }
        OpKind::Slice => {
            let (axis, start, len) = if alt { (0, 1, 2) } else { (1, 2, 3) };
            OpCase::new(vec![uniform(rng, &[4, 6], -1.0, 1.0)], move |t, v| t.slice(v[0], axis, start, len))
        }
        OpKind::Transpose => OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], |t, v| t.transpose(v[0])),
        OpKind::Mean | OpKind::Sum => {
            let axis = [None, Some(0), Some(1)][i % 3];
            OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], move |t, v| {
                if kind == OpKind::Mean {
                    t.mean(v[0], axis)
                } else {
                    t.sum(v[0], axis)
                }
            })
        }
        OpKind::MaskedFill => {
            let m = mask(rng, 12);
            OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], move |t, v| t.masked_fill(v[0], &m, 0.5))
        }
        OpKind::Scale => {
            let c = rng.random_range(-2.0..2.0);
            OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], move |t, v| t.scale(v[0], c))
        }
        OpKind::AddScalar => {
            let c = rng.random_range(-2.0..2.0);
            OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], move |t, v| t.add_scalar(v[0], c))
        }
        OpKind::Expand => OpCase::new(vec![uniform(rng, &[2, 3], -1.0, 1.0)], |t, v| t.expand(v[0], 4)),
        OpKind::Reshape => OpCase::new(vec![uniform(rng, &[3, 4], -1.0, 1.0)], |t, v| t.reshape(v[0], &[2, 6])),
        OpKind::Select => {
            let m = mask(rng, 12);
            let inputs = vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
            OpCase::new(inputs, move |t, v| t.select(&m, v[0], v[1]))
        }
    }
}

/// `Σ out ⊙ W` with `W` fixed for the case.
fn contract(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var, AutodiffError> {
    let wv = t.constant(w.clone());
    let p = t.mul(out, wv)?;
    t.sum(p, None)
}

/// Checks one op over `opts.points` random cases.
pub fn check_op(kind: OpKind, opts: &SuiteOptions) -> CheckRow {
    let mut row = CheckRow::new("op", kind.name());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for i in 0..opts.points {
        let case = op_case(kind, &mut rng, i);
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = case.inputs.iter().map(|x| t.constant(x.clone())).collect();
            match (case.run)(&mut t, &vars) {
                Ok(o) => t.shape(o).to_vec(),
                Err(e) => {
                    row.fail(format!("forward failed: {e}"));
                    return row;
                }
            }
        };
        let w = uniform(&mut rng, &out_shape, -1.0, 1.0);
        for k in 0..case.inputs.len() {
            let f = |t: &mut Tape, x: Var| {
                if let Some(fk) = opts.fault {
                    t.inject_fault(fk);
                }
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == k { x } else { t.constant(v.clone()) })
                    .collect();
                let out = (case.run)(t, &vars)?;
                contract(t, out, &w)
            };
            match grad_check(f, &case.inputs[k], opts.eps, FD_TOL) {
                Ok(r) => row.absorb(r.max_rel_err, r.passed, r.failure.map(|m| format!("point {i}: {m}"))),
                Err(e) => row.fail(format!("point {i}: {e}")),
            }
        }
        row.points += 1;
    }
    row
}

pub fn op_checks(opts: &SuiteOptions) -> Vec<CheckRow> {
    OpKind::ALL.iter().map(|&k| check_op(k, opts)).collect()
}

fn block_row<D, F>(name: &str, opts: &SuiteOptions, draw: D, f: F) -> CheckRow
where
    D: Fn(u64) -> ParamStore,
    F: Fn(&mut Tape, &Bindings) -> Result<Var, NnError>,
{
    param_row("block", name, opts, draw, f)
}

/// Parameter-space check of `f`. Stores from `draw(round)` are checked in
/// rounds until `opts.points` coordinates have been compared.
pub fn param_row<D, F>(group: &str, name: &str, opts: &SuiteOptions, draw: D, f: F) -> CheckRow
where
    D: Fn(u64) -> ParamStore,
    F: Fn(&mut Tape, &Bindings) -> Result<Var, NnError>,
{
    let mut row = CheckRow::new(group, name);
    let wrapped = |t: &mut Tape, b: &Bindings| {
        if let Some(k) = opts.fault {
            t.inject_fault(k);
        }
        f(t, b)
    };
    let mut round = 0;
    while row.points < opts.points && row.passed {
        let store = draw(round);
        let want = opts.points - row.points;
        match grad_check_params(&store, want, opts.seed ^ round, opts.eps, FD_TOL, &wrapped) {
            Ok(r) => {
                row.points += r.coords.len();
                row.absorb(r.max_rel_err, r.passed, r.failure);
            }
            Err(e) => row.fail(e.to_string()),
        }
        round += 1;
    }
    row
}

/// Contracts a block output with a seeded weight tensor.
pub fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &t.shape(out).to_vec(), -1.0, 1.0);
    Ok(contract(t, out, &w)?)
}

/// Initialised parameters with every entry moved by up to ±0.2.
pub fn perturbed(decls: &[ParamDecl], seed: u64) -> ParamStore {
    // Norm gains, biases and zero-initialised weights would otherwise
    // give non-generic gradients.
    let mut s: ParamStore = init_params(decls, seed).expect("valid declarations");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let names: Vec<String> = s.names().cloned().collect();
    for n in names {
        for v in s.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    s
}

pub fn block_checks(opts: &SuiteOptions) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let s = opts.seed;
    // Parameters plus named inputs of the given shapes, redrawn per round.
    let draw = |decls: Vec<ParamDecl>, inputs: Vec<(&'static str, Vec<usize>)>| {
        move |round: u64| {
            let seed = s.wrapping_add(round.wrapping_mul(0x9e37_79b9));
            let mut store = perturbed(&decls, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a9);
            for (name, shape) in &inputs {
                store.insert(*name, uniform(&mut rng, shape, -1.0, 1.0)).expect("input name is unique");
            }
            store
        }
    };

    let dense = Dense::new("dense", 5, 4, Activation::Gelu).unwrap();
    rows.push(block_row("dense", opts, draw(dense.decls(), vec![("x", vec![3, 5])]), |t, b| {
        let y = dense.forward(t, b, b.get("x")?)?;
        project(t, y, s)
    }));

    let norm = Norm::new("norm", 6).unwrap();
    rows.push(block_row("norm", opts, draw(norm.decls(), vec![("x", vec![3, 6])]), |t, b| {
        let y = norm.forward(t, b, b.get("x")?)?;
        project(t, y, s)
    }));

    let conv1 = Conv1dLayer::new("conv1d", 3, 4, 3, 2, Activation::Gelu, true).unwrap();
    rows.push(block_row("conv1d_module", opts, draw(conv1.decls(), vec![("x", vec![8, 3])]), |t, b| {
        let y = conv1.forward(t, b, b.get("x")?)?;
        project(t, y, s)
    }));

    let conv2 = Conv2dLayer::new("conv2d", 2, 3, (3, 3), (2, 2), Activation::Gelu).unwrap();
    rows.push(block_row("conv2d_module", opts, draw(conv2.decls(), vec![("x", vec![2, 6, 5])]), |t, b| {
        let y = conv2.forward(t, b, b.get("x")?)?;
        project(t, y, s)
    }));

    let emb = Embedding::new("emb", 7, 4).unwrap();
    let ids = [3, 0, 6, 3, 2];
    rows.push(block_row("embedding", opts, draw(emb.decls(), vec![]), |t, b| {
        let y = emb.forward(t, b, &ids)?;
        project(t, y, s)
    }));

    let mha = MultiHeadAttention::new("mha", 8, 6, 2).unwrap();
    rows.push(block_row("attention", opts, draw(mha.decls(), vec![("q", vec![4, 8]), ("kv", vec![3, 6])]), |t, b| {
        let y = mha.forward(t, b, b.get("q")?, b.get("kv")?, None)?;
        project(t, y, s)
    }));

    let enc = TransformerBlock::new("enc", 8, 2, 16).unwrap();
    let mask = causal_mask(5);
    rows.push(block_row("transformer_block", opts, draw(enc.decls(), vec![("x", vec![5, 8])]), |t, b| {
        let y = enc.forward(t, b, b.get("x")?, Some(&mask))?;
        project(t, y, s)
    }));

    let dec = DecoderBlock::new("dec", 8, 6, 2, 16).unwrap();
    let mask = causal_mask(4);
    rows.push(block_row("decoder_block", opts, draw(dec.decls(), vec![("x", vec![4, 8]), ("mem", vec![5, 6])]), |t, b| {
        let y = dec.forward(t, b, b.get("x")?, b.get("mem")?, Some(&mask))?;
        project(t, y, s)
    }));
    rows
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, losses::LossError>>;

fn loss_row(name: &str, opts: &SuiteOptions, mut gen: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, LossFn)) -> CheckRow {
    let mut row = CheckRow::new("loss", name);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ name.bytes().fold(0u64, |h, b| h.wrapping_mul(31) ^ b as u64));
    for i in 0..opts.points {
        let (inputs, run) = gen(&mut rng);
        for k in 0..inputs.len() {
            let f = |t: &mut Tape, x: Var| {
                if let Some(fk) = opts.fault {
                    t.inject_fault(fk);
                }
                let vars: Vec<Var> =
                    inputs.iter().enumerate().map(|(j, v)| if j == k { x } else { t.constant(v.clone()) }).collect();
                run(t, &vars).map_err(|e| match e {
                    losses::LossError::Autodiff(a) => a,
                    other => AutodiffError::Invalid { op: OpKind::Sum, msg: other.to_string() },
                })
            };
            match grad_check(f, &inputs[k], opts.eps, FD_TOL) {
                Ok(r) => row.absorb(r.max_rel_err, r.passed, r.failure.map(|m| format!("point {i}: {m}"))),
                Err(e) => row.fail(format!("point {i}: {e}")),
            }
        }
        row.points += 1;
    }
    row
}

/// A random target sequence of content tokens ending in EOS then PAD.
fn random_target(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let n = rng.random_range(1..len);
    let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(3..vocab)).collect();
    t.push(EOS);
    t.resize(len, 0);
    t
}

pub fn loss_checks(opts: &SuiteOptions) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for rule in [SmoothingRule::Literal, SmoothingRule::Standard] {
        let name = format!("lsr_ce_{}", rule.name());
        rows.push(loss_row(&name, opts, |rng| {
            let target = random_target(rng, 5, 6);
            let cfg = LossConfig { smoothing: rule, ..LossConfig::default() };
            let run: LossFn = Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                Ok(losses::lsr_ce(t, p, &target, &cfg)?.loss)
            });
            (vec![uniform(rng, &[5, 6], -2.0, 2.0)], run)
        }));
    }
    rows.push(loss_row("disc_loss", opts, |rng| {
        let run: LossFn = Box::new(|t, v| losses::disc_loss(t, v[0], v[1]));
        (vec![uniform(rng, &[], 0.05, 0.95), uniform(rng, &[], 0.05, 0.95)], run)
    }));
    rows.push(loss_row("gen_loss", opts, |rng| {
        let cfg = LossConfig::default();
        let run: LossFn = Box::new(move |t, v| losses::gen_loss(t, v[0], v[1], v[2], &cfg));
        (vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[], 0.05, 0.95)], run)
    }));
    rows.push(loss_row("probe_net_loss", opts, |rng| {
        let run: LossFn = Box::new(|t, v| losses::probe_net_loss(t, v[0], v[1], v[2]));
        (vec![uniform(rng, &[6], 0.0, 2.0), uniform(rng, &[6], 0.0, 2.0), uniform(rng, &[6], 0.05, 0.95)], run)
    }));
    rows.push(loss_row("probe_comp_loss", opts, |rng| {
        let target = random_target(rng, 5, 6);
        let mut probe = mask(rng, 5);
        probe[0] = true;
        let run: LossFn = Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(losses::probe_comp_loss(t, p, &target, &probe)?.loss)
        });
        (vec![uniform(rng, &[5, 6], -2.0, 2.0)], run)
    }));
    rows
}

/// Direct-summation value of the smoothed cross-entropy: every valid
/// position contributes `−Σ_j w_j ln p_j` with `w = κ` on the target and
/// the rule's off-mass split evenly elsewhere.
fn lsr_oracle(p: &[Vec<f64>], target: &[usize], kappa: f64, rule: SmoothingRule) -> f64 {
    let e = p[0].len();
    let off = match rule {
        SmoothingRule::Literal => kappa,
        SmoothingRule::Standard => 1.0 - kappa,
    } / (e - 1) as f64;
    let (mut total, mut n) = (0.0, 0usize);
    for (i, &t) in target.iter().enumerate() {
        if t == losses::PAD {
            break;
        }
        n += 1;
        for (j, &pj) in p[i].iter().enumerate() {
            let w = if j == t { kappa } else { off };
            if w != 0.0 {
                total -= w * pj.max(losses::PROB_FLOOR).ln();
            }
        }
        if t == EOS {
            break;
        }
    }
    total / n as f64
}

fn value_of(f: impl FnOnce(&mut Tape) -> Result<Var, losses::LossError>) -> Result<f64, losses::LossError> {
    let mut t = Tape::new();
    let v = f(&mut t)?;
    Ok(t.value(v).item())
}

fn oracle_row(name: &str, tol: f64, cases: impl IntoIterator<Item = (Result<f64, losses::LossError>, f64)>) -> CheckRow {
    let mut row = CheckRow::new("oracle", name);
    for (i, (got, want)) in cases.into_iter().enumerate() {
        row.points += 1;
        match got {
            Ok(g) => {
                let err = (g - want).abs();
                row.max_rel_err = row.max_rel_err.max(err);
                if !(err <= tol) {
                    row.fail(format!("case {i}: {g} vs {want}"));
                }
            }
            Err(e) => row.fail(format!("case {i}: {e}")),
        }
    }
    row
}

/// Loss values against independent direct computations. `max_rel_err`
/// holds the largest absolute deviation.
pub fn loss_oracle_checks(seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let (e, l) = (4usize, 3usize);
    // every target sequence over a 4-token vocabulary, each with fresh
    // random distributions
    let mut cases = Vec::new();
    for code in 0..e.pow(l as u32) {
        let target: Vec<usize> = (0..l).map(|k| (code / e.pow(k as u32)) % e).collect();
        if target[0] == losses::PAD {
            continue;
        }
        let p: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                let raw: Vec<f64> = (0..e).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            })
            .collect();
        cases.push((target, p));
    }
    for rule in [SmoothingRule::Literal, SmoothingRule::Standard] {
        let cfg = LossConfig { smoothing: rule, ..LossConfig::default() };
        let results = cases.iter().map(|(target, p)| {
            let got = value_of(|t| {
                let v = t.constant(Tensor::from_rows(p).expect("rectangular"));
                Ok(losses::lsr_ce(t, v, target, &cfg)?.loss)
            });
            (got, lsr_oracle(p, target, cfg.kappa, rule))
        });
        rows.push(oracle_row(&format!("lsr_ce_{}_exhaustive", rule.name()), 1e-12, results.collect::<Vec<_>>()));
    }

    let cfg = LossConfig { kappa: 1.0, smoothing: SmoothingRule::Standard, ..LossConfig::default() };
    let results = cases.iter().map(|(target, p)| {
        let got = value_of(|t| {
            let v = t.constant(Tensor::from_rows(p).expect("rectangular"));
            Ok(losses::lsr_ce(t, v, target, &cfg)?.loss)
        });
        let valid = losses::valid_positions(target);
        let n = valid.iter().filter(|&&v| v).count() as f64;
        let ce = -(0..l).filter(|&i| valid[i]).map(|i| p[i][target[i]].ln()).sum::<f64>() / n;
        (got, ce)
    });
    rows.push(oracle_row("lsr_ce_standard_kappa1_is_ce", 1e-12, results.collect::<Vec<_>>()));

    let half = |t: &mut Tape| t.constant(Tensor::scalar(0.5));
    let disc = value_of(|t| {
        let h = half(t);
        losses::disc_loss(t, h, h)
    });
    let gen = value_of(|t| {
        let mut fv = vec![0.0; 10];
        fv[3] = 1.0;
        let f = t.constant(Tensor::new([2, 5], fv)?);
        let ft = t.constant(Tensor::zeros([2, 5]));
        let h = half(t);
        losses::gen_loss(t, f, ft, h, &LossConfig::default())
    });
    rows.push(oracle_row("disc_gen_hand_values", 0.0, [(disc, 0.25), (gen, 0.625)]));

    let mut net_cases = Vec::new();
    let mut comp_cases = Vec::new();
    for _ in 0..50 {
        let n = 6;
        let i: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let it: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let want: f64 = (0..n).map(|k| (i[k] - c[k] * it[k]).powi(2)).sum();
        let got = value_of(|t| {
            let a = t.constant(Tensor::new([n], i.clone())?);
            let b = t.constant(Tensor::new([n], it.clone())?);
            let cv = t.constant(Tensor::new([n], c.clone())?);
            losses::probe_net_loss(t, a, b, cv)
        });
        net_cases.push((got, want));

        let target: Vec<usize> = (0..n).map(|_| rng.random_range(0..e)).collect();
        let probe = mask(&mut rng, n);
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..e).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            })
            .collect();
        let want: f64 = (0..n).filter(|&k| probe[k]).map(|k| -p[k][target[k]].ln()).sum();
        let got = value_of(|t| {
            let v = t.constant(Tensor::from_rows(&p)?);
            Ok(losses::probe_comp_loss(t, v, &target, &probe)?.loss)
        });
        comp_cases.push((got, want));
    }
    rows.push(oracle_row("probe_net_direct", 1e-12, net_cases));
    rows.push(oracle_row("probe_comp_masked", 1e-12, comp_cases));
    rows
}

/// Signal power over measured noise power, in dB.
fn empirical_snr_db(kind: ChannelKind, snr_db: f64, blocks: usize, per_block: usize) -> f64 {
    let s = 0.5f64.sqrt();
    let x: Vec<Complex<f64>> =
        (0..per_block).map(|i| Complex::new(if i % 2 == 0 { s } else { -s }, if i % 3 == 0 { s } else { -s })).collect();
    let cfg = ChannelConfig::new(kind, snr_db, 17);
    let (mut sig, mut noise) = (0.0, 0.0);
    for b in 0..blocks {
        let Ok((y, r)) = apply_channel(&x, &cfg, b as u64) else { return f64::NAN };
        for (yi, xi) in y.iter().zip(&x) {
            noise += (yi - r.h * xi).norm_sqr();
            sig += xi.norm_sqr();
        }
    }
    10.0 * (sig / noise).log10()
}

/// Channel statistics over `blocks × per_block` symbols and `gain_blocks`
/// fading draws.
pub fn channel_checks(blocks: usize, per_block: usize, gain_blocks: usize) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for (kind, snr) in [(ChannelKind::Awgn, 0.0), (ChannelKind::Awgn, 12.0), (ChannelKind::Rayleigh, 3.0)] {
        let mut row = CheckRow::new("channel", &format!("{kind}_snr_{snr}dB"));
        let got = empirical_snr_db(kind, snr, blocks, per_block);
        row.points = blocks * per_block;
        row.max_rel_err = (got - snr).abs();
        if !(row.max_rel_err <= 0.1) {
            row.fail(format!("measured {got:.4} dB"));
        }
        rows.push(row);
    }

    let mut row = CheckRow::new("channel", "rayleigh_mean_gain");
    let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 10.0, 5);
    let one = [Complex::new(1.0, 0.0)];
    let mean = (0..gain_blocks as u64)
        .map(|b| apply_channel(&one, &cfg, b).map_or(f64::NAN, |r| r.1.h.norm_sqr()))
        .sum::<f64>()
        / gain_blocks as f64;
    row.points = gain_blocks;
    row.max_rel_err = (mean - 1.0).abs();
    if !(row.max_rel_err <= 0.02) {
        row.fail(format!("mean |h|² = {mean:.5}"));
    }
    rows.push(row);

    let mut row = CheckRow::new("channel", "noiseless_equalization");
    let cfg = ChannelConfig::new(ChannelKind::Rayleigh, f64::INFINITY, 9);
    let x: Vec<Complex<f64>> = (0..64).map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
    for b in 0..100u64 {
        match apply_channel(&x, &cfg, b).and_then(|(y, r)| equalize(&y, &r)) {
            Ok(eq) => {
                let err = eq.iter().zip(&x).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                row.max_rel_err = row.max_rel_err.max(err);
            }
            Err(e) => row.fail(e.to_string()),
        }
        row.points += 1;
    }
    if row.max_rel_err > 1e-12 {
        row.fail(format!("residual {:.3e}", row.max_rel_err));
    }
    rows.push(row);
    rows
}
