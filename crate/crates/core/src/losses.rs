//! Training objectives.
//!
//! * [`lsr_ce`]: label-smoothed cross-entropy. Per valid position `l` with
//!   true token `t`,
//!   `κ·(−log p(t)) + Σ_{e≠t} (m/(E−1))·(−log p(e))`, averaged over valid
//!   positions. `m = κ` under [`SmoothingRule::Literal`] and `m = 1 − κ`
//!   under [`SmoothingRule::Standard`]. A position is valid up to and
//!   including the first EOS, and never at or after the first PAD.
//! * [`disc_loss`]: `½(D_real − 1)² + ½·D_fake²`.
//! * [`gen_loss`]: `½·ξ·mean((F − F̃)²) + ½(D_fake − 1)²`.
//! * [`probe_net_loss`]: `Σ_l (i_l − c_l·ĩ_l)²` over per-position scalars.
//! * [`probe_comp_loss`]: `−Σ_{l : C_l = 1} log p_l(t_l)`.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{loss}: {msg}")]
    Invalid { loss: &'static str, msg: String },
}

fn invalid(loss: &'static str, msg: impl Into<String>) -> LossError {
    LossError::Invalid { loss, msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothingRule {
    /// Off-token mass `κ`, spread over `E − 1` tokens.
    Literal,
    /// Off-token mass `1 − κ`.
    Standard,
}

impl SmoothingRule {
    pub fn name(self) -> &'static str {
        match self {
            SmoothingRule::Literal => "literal",
            SmoothingRule::Standard => "standard",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(SmoothingRule::Literal),
            "standard" => Some(SmoothingRule::Standard),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kappa: f64,
    pub xi: f64,
    pub smoothing: SmoothingRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kappa: 0.95, xi: 10.0, smoothing: SmoothingRule::Literal }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(invalid("lsr_ce", format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(invalid("gen_loss", format!("xi {} must be positive", self.xi)));
        }
        Ok(())
    }

    fn off_mass(&self) -> f64 {
        match self.smoothing {
            SmoothingRule::Literal => self.kappa,
            SmoothingRule::Standard => 1.0 - self.kappa,
        }
    }
}

/// Loss value plus diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: Var,
    /// Positions that contributed.
    pub positions: usize,
    /// Needed probabilities that fell below [`PROB_FLOOR`] and were clamped.
    pub clamped: usize,
}

/// Per-position validity: up to and including the first EOS, stopping at
/// the first PAD.
pub fn valid_positions(target: &[usize]) -> Vec<bool> {
    let mut out = vec![false; target.len()];
    for (i, &t) in target.iter().enumerate() {
        if t == PAD {
            break;
        }
        out[i] = true;
        if t == EOS {
            break;
        }
    }
    out
}

fn dists<R: Real>(tape: &Tape<R>, pred: Var, target: &[usize], loss: &'static str) -> Result<(usize, usize), LossError> {
    let (l, e) = tape
        .value(pred)
        .dims2()
        .ok_or_else(|| invalid(loss, format!("predictions must be (L, E), got {:?}", tape.shape(pred))))?;
    if target.len() != l {
        return Err(invalid(loss, format!("{} targets for {l} positions", target.len())));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= e) {
        return Err(invalid(loss, format!("token {t} outside vocabulary of {e}")));
    }
    Ok((l, e))
}

/// Label-smoothed cross-entropy over `(L, E)` distributions.
pub fn lsr_ce<R: Real>(
    tape: &mut Tape<R>,
    pred: Var,
    target: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let (l, e) = dists(tape, pred, target, "lsr_ce")?;
    if e < 2 {
        return Err(invalid("lsr_ce", "vocabulary needs at least two tokens"));
    }
    let valid = valid_positions(target);
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(invalid("lsr_ce", "no valid target position"));
    }
    let (on, off) = (cfg.kappa, cfg.off_mass() / (e - 1) as f64);
    let mut weights = vec![R::zero(); l * e];
    let mut clamped = 0;
    let p = tape.value(pred).data();
    for i in (0..l).filter(|&i| valid[i]) {
        for j in 0..e {
            let w = if j == target[i] { on } else { off };
            if w != 0.0 {
                weights[i * e + j] = R::lit(w);
                if p[i * e + j] < R::lit(PROB_FLOOR) {
                    clamped += 1;
                }
            }
        }
    }
    let logp = tape.log_clamped(pred, R::lit(PROB_FLOOR))?;
    let w = tape.constant(Tensor::new([l, e], weights)?);
    let wl = tape.mul(w, logp)?;
    let s = tape.sum(wl, None)?;
    let loss = tape.scale(s, -R::one() / R::from_count(n))?;
    Ok(LossOutput { loss, positions: n, clamped })
}

fn scalar<R: Real>(tape: &mut Tape<R>, v: Var, what: &'static str) -> Result<Var, LossError> {
    if tape.value(v).numel() != 1 {
        return Err(invalid(what, format!("expected a single score, got shape {:?}", tape.shape(v))));
    }
    if tape.value(v).is_scalar() {
        Ok(v)
    } else {
        Ok(tape.reshape(v, &[])?)
    }
}

/// `½(x − target)²` for a one-element `x`.
fn half_sq_dist<R: Real>(tape: &mut Tape<R>, x: Var, target: f64) -> Result<Var, LossError> {
    let d = if target == 0.0 { x } else { tape.add_scalar(x, R::lit(-target))? };
    let s = tape.square(d)?;
    Ok(tape.scale(s, R::lit(0.5))?)
}

pub fn disc_loss<R: Real>(tape: &mut Tape<R>, d_real: Var, d_fake: Var) -> Result<Var, LossError> {
    let r = scalar(tape, d_real, "disc_loss")?;
    let f = scalar(tape, d_fake, "disc_loss")?;
    let a = half_sq_dist(tape, r, 1.0)?;
    let b = half_sq_dist(tape, f, 0.0)?;
    Ok(tape.add(a, b)?)
}

pub fn gen_loss<R: Real>(
    tape: &mut Tape<R>,
    f: Var,
    f_tilde: Var,
    d_fake: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    if tape.shape(f) != tape.shape(f_tilde) {
        return Err(invalid("gen_loss", format!("F {:?} vs F̃ {:?}", tape.shape(f), tape.shape(f_tilde))));
    }
    let df = scalar(tape, d_fake, "gen_loss")?;
    let d = tape.sub(f, f_tilde)?;
    let sq = tape.square(d)?;
    let mse = tape.mean(sq, None)?;
    let a = tape.scale(mse, R::lit(0.5 * cfg.xi))?;
    let b = half_sq_dist(tape, df, 1.0)?;
    Ok(tape.add(a, b)?)
}

/// `Σ_l (i_l − c_l·ĩ_l)²`; all three are length-`L′` vectors.
pub fn probe_net_loss<R: Real>(tape: &mut Tape<R>, i: Var, i_tilde: Var, c: Var) -> Result<Var, LossError> {
    let (a, b, k) = (tape.shape(i).to_vec(), tape.shape(i_tilde).to_vec(), tape.shape(c).to_vec());
    if a.len() != 1 || a != b || a != k {
        return Err(invalid("probe_net_loss", format!("lengths differ: I {a:?}, Ĩ {b:?}, c {k:?}")));
    }
    let ci = tape.mul(c, i_tilde)?;
    let d = tape.sub(i, ci)?;
    let sq = tape.square(d)?;
    Ok(tape.sum(sq, None)?)
}

/// `−Σ_{l : C_l} log p_l(t_l)`; zero when no position is probed.
pub fn probe_comp_loss<R: Real>(
    tape: &mut Tape<R>,
    pred: Var,
    target: &[usize],
    probe: &[bool],
) -> Result<LossOutput, LossError> {
    let (l, e) = dists(tape, pred, target, "probe_comp_loss")?;
    if probe.len() != l {
        return Err(invalid("probe_comp_loss", format!("probe length {} for {l} positions", probe.len())));
    }
    let rows: Vec<usize> = (0..l).filter(|&i| probe[i]).map(|i| i * e + target[i]).collect();
    if rows.is_empty() {
        let loss = tape.constant(Tensor::scalar(R::zero()));
        return Ok(LossOutput { loss, positions: 0, clamped: 0 });
    }
    let clamped = rows.iter().filter(|&&k| tape.value(pred).data()[k] < R::lit(PROB_FLOOR)).count();
    let flat = tape.reshape(pred, &[l * e, 1])?;
    let picked = tape.gather(flat, &rows)?;
    let logp = tape.log_clamped(picked, R::lit(PROB_FLOOR))?;
    let s = tape.sum(logp, None)?;
    let loss = tape.scale(s, -R::one())?;
    Ok(LossOutput { loss, positions: rows.len(), clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(t: &Tape<f64>, v: Var) -> f64 {
        t.value(v).item()
    }

    fn dist(rows: &[[f64; 4]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn valid_positions_stop_at_eos_and_pad() {
        assert_eq!(valid_positions(&[5, 6, EOS, PAD]), vec![true, true, true, false]);
        assert_eq!(valid_positions(&[5, PAD, 6]), vec![true, false, false]);
        assert_eq!(valid_positions(&[EOS, 5]), vec![true, false]);
    }

    #[test]
    fn standard_rule_at_full_confidence_is_plain_ce() {
        let mut t = Tape::new();
        let p = t.constant(dist(&[[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]]));
        let cfg = LossConfig { kappa: 1.0, smoothing: SmoothingRule::Standard, ..LossConfig::default() };
        let out = lsr_ce(&mut t, p, &[3, EOS], &cfg).unwrap();
        let ce = -(0.4f64.ln() + 0.1f64.ln()) / 2.0;
        assert_eq!(value(&t, out.loss), ce);
    }

    #[test]
    fn uniform_single_position_hand_sum() {
        for (rule, mass) in [(SmoothingRule::Literal, 0.95), (SmoothingRule::Standard, 0.05)] {
            let mut t = Tape::new();
            let p = t.constant(dist(&[[0.25; 4]]));
            let cfg = LossConfig { smoothing: rule, ..LossConfig::default() };
            let out = lsr_ce(&mut t, p, &[3], &cfg).unwrap();
            let l4 = -(0.25f64.ln());
            let oracle = 0.95 * l4 + 3.0 * (mass / 3.0) * l4;
            assert!((value(&t, out.loss) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_is_reported() {
        let mut t = Tape::new();
        let p = t.constant(dist(&[[0.0, 0.5, 0.5, 0.0]]));
        let out = lsr_ce(&mut t, p, &[1], &LossConfig::default()).unwrap();
        assert_eq!(out.clamped, 2);
        assert!(value(&t, out.loss).is_finite());
    }

    #[test]
    fn disc_and_gen_plug_ins() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::scalar(0.5));
        let d = disc_loss(&mut t, h, h).unwrap();
        assert_eq!(value(&t, d), 0.25);
        let one = t.constant(Tensor::scalar(1.0));
        let zero = t.constant(Tensor::scalar(0.0));
        let perfect = disc_loss(&mut t, one, zero).unwrap();
        assert_eq!(value(&t, perfect), 0.0);
        let worst = disc_loss(&mut t, zero, one).unwrap();
        assert_eq!(value(&t, worst), 1.0);

        // one unit difference over ten entries: mean 0.1
        let mut fv = vec![0.0; 10];
        fv[3] = 1.0;
        let f = t.constant(Tensor::new([2, 5], fv).unwrap());
        let ft = t.constant(Tensor::zeros([2, 5]));
        let h = t.constant(Tensor::new([1], vec![0.5]).unwrap());
        let g = gen_loss(&mut t, f, ft, h, &LossConfig::default()).unwrap();
        assert_eq!(value(&t, g), 0.625);
        let perfect = gen_loss(&mut t, ft, ft, one, &LossConfig::default()).unwrap();
        assert_eq!(value(&t, perfect), 0.0);
    }

    #[test]
    fn gen_loss_shape_mismatch() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros([2, 2]));
        let ft = t.constant(Tensor::zeros([2, 3]));
        let d = t.constant(Tensor::scalar(0.5));
        assert!(gen_loss(&mut t, f, ft, d, &LossConfig::default()).is_err());
    }

    #[test]
    fn probe_net_direct_value() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let it = t.constant(Tensor::new([2], vec![1.0, 1.0]).unwrap());
        let c = t.constant(Tensor::new([2], vec![1.0, 0.5]).unwrap());
        let l = probe_net_loss(&mut t, i, it, c).unwrap();
        assert_eq!(value(&t, l), 2.25);
        let short = t.constant(Tensor::zeros([3]));
        assert!(probe_net_loss(&mut t, i, it, short).is_err());
    }

    #[test]
    fn probe_comp_masks_positions() {
        let mut t = Tape::new();
        let p = t.constant(dist(&[[0.1, 0.2, 0.3, 0.4], [0.5, 0.2, 0.2, 0.1]]));
        let none = probe_comp_loss(&mut t, p, &[3, 0], &[false, false]).unwrap();
        assert_eq!(value(&t, none.loss), 0.0);
        let first = probe_comp_loss(&mut t, p, &[3, 0], &[true, false]).unwrap();
        assert_eq!(value(&t, first.loss), -(0.4f64.ln()));
        let both = probe_comp_loss(&mut t, p, &[3, 0], &[true, true]).unwrap();
        assert_eq!(value(&t, both.loss), -(0.4f64.ln() + 0.5f64.ln()));
    }
}
