use super::layers::{Activation, Dense, Norm};
use super::{join, Bindings, LayerSpec, NnError, ParamDecl};
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Real;

/// Additive causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<R: Real>(n: usize) -> Tensor<R> {
    Tensor::from_fn([n, n], |k| if k % n > k / n { R::neg_infinity() } else { R::zero() })
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs. Query, value and output projections carry biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub name: String,
    pub width: usize,
    pub kv_width: usize,
    pub heads: usize,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, width: usize, kv_width: usize, heads: usize) -> Result<Self, NnError> {
        let name = name.into();
        if heads == 0 || width % heads != 0 {
            return Err(NnError::spec(&name, format!("{heads} heads do not divide width {width}")));
        }
        let lin = Activation::Identity;
        Ok(Self {
            q: Dense::new(join(&name, "q"), width, width, lin)?,
            // A key bias shifts every score in a row equally; softmax
            // ignores it, so it is omitted.
            k: Dense::linear(join(&name, "k"), kv_width, width)?,
            v: Dense::new(join(&name, "v"), kv_width, width, lin)?,
            o: Dense::new(join(&name, "o"), width, width, lin)?,
            name,
            width,
            kv_width,
            heads,
        })
    }

    /// Returns the output `(n, width)` and the per-head attention weights
    /// `(n, m)`.
    pub fn forward_with_weights<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bindings,
        query: Var,
        kv: Var,
        mask: Option<&Tensor<R>>,
    ) -> Result<(Var, Vec<Var>), NnError> {
        let n = tape.shape(query)[0];
        let m = match *tape.shape(kv) {
            [m, w] if w == self.kv_width => m,
            [_, w] => return Err(NnError::Width { layer: self.name.clone(), expected: self.kv_width, got: w }),
            _ => return Err(NnError::spec(&self.name, "key/value input must be a matrix")),
        };
        let (blocked, bias) = match mask {
            None => (None, None),
            Some(t) => {
                if t.shape() != [n, m] {
                    return Err(NnError::spec(
                        &self.name,
                        format!("mask shape {:?} does not match scores ({n}, {m})", t.shape()),
                    ));
                }
                let blocked: Vec<bool> = t.data().iter().map(|&v| v == R::neg_infinity()).collect();
                if t.data().iter().any(|v| v.is_nan() || *v == R::infinity()) {
                    return Err(NnError::spec(&self.name, "mask entries must be finite or -inf"));
                }
                let has_bias = t.data().iter().any(|&v| v.is_finite() && v != R::zero());
                let bias = has_bias.then(|| tape.constant(t.map(|v| if v.is_finite() { v } else { R::zero() })));
                (blocked.iter().any(|&b| b).then_some(blocked), bias)
            }
        };

        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, kv)?;
        let v = self.v.forward(tape, p, kv)?;
        let dh = self.width / self.heads;
        let scale = R::one() / R::from_count(dh).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let mut s = tape.matmul(qh, kt)?;
            s = tape.scale(s, scale)?;
            if let Some(b) = bias {
                s = tape.add(s, b)?;
            }
            if let Some(bl) = &blocked {
                s = tape.masked_fill(s, bl, R::neg_infinity())?;
            }
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        Ok((self.o.forward(tape, p, cat)?, weights))
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bindings,
        query: Var,
        kv: Var,
        mask: Option<&Tensor<R>>,
    ) -> Result<Var, NnError> {
        Ok(self.forward_with_weights(tape, p, query, kv, mask)?.0)
    }
}

impl LayerSpec for MultiHeadAttention {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|d| d.decls()).collect()
    }
}

/// Position-wise GELU feed-forward pair.
#[derive(Clone, Debug, PartialEq)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

impl FeedForward {
    fn new(name: &str, width: usize, hidden: usize) -> Result<Self, NnError> {
        Ok(Self {
            up: Dense::new(join(name, "ff.0"), width, hidden, Activation::Gelu)?,
            down: Dense::new(join(name, "ff.1"), hidden, width, Activation::Identity)?,
        })
    }

    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        let h = self.up.forward(tape, p, x)?;
        self.down.forward(tape, p, h)
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.up.decls();
        d.extend(self.down.decls());
        d
    }
}

/// Pre-norm encoder block:
/// `h = x + MHA(LN₁(x))`, `y = h + FF(LN₂(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    ln1: Norm,
    attn: MultiHeadAttention,
    ln2: Norm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(name: impl Into<String>, width: usize, heads: usize, ff_width: usize) -> Result<Self, NnError> {
        let name = name.into();
        Ok(Self {
            ln1: Norm::new(join(&name, "ln1"), width)?,
            attn: MultiHeadAttention::new(join(&name, "attn"), width, width, heads)?,
            ln2: Norm::new(join(&name, "ln2"), width)?,
            ff: FeedForward::new(&name, width, ff_width)?,
            name,
            width,
            heads,
            ff_width,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    /// `mask` is additive `(n, n)`; `-inf` forbids a position.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bindings,
        x: Var,
        mask: Option<&Tensor<R>>,
    ) -> Result<Var, NnError> {
        let n1 = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, n1, n1, mask)?;
        let h = tape.add(x, a)?;
        let n2 = self.ln2.forward(tape, p, h)?;
        let f = self.ff.forward(tape, p, n2)?;
        Ok(tape.add(h, f)?)
    }
}

impl LayerSpec for TransformerBlock {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.ln1.decls();
        d.extend(self.attn.decls());
        d.extend(self.ln2.decls());
        d.extend(self.ff.decls());
        d
    }
}

/// Pre-norm decoder block: masked self-attention, cross-attention over
/// `memory`, feed-forward; each sublayer residual.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub name: String,
    pub width: usize,
    pub memory_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    ln1: Norm,
    self_attn: MultiHeadAttention,
    ln2: Norm,
    cross_attn: MultiHeadAttention,
    ln3: Norm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(
        name: impl Into<String>,
        width: usize,
        memory_width: usize,
        heads: usize,
        ff_width: usize,
    ) -> Result<Self, NnError> {
        let name = name.into();
        Ok(Self {
            ln1: Norm::new(join(&name, "ln1"), width)?,
            self_attn: MultiHeadAttention::new(join(&name, "self"), width, width, heads)?,
            ln2: Norm::new(join(&name, "ln2"), width)?,
            cross_attn: MultiHeadAttention::new(join(&name, "cross"), width, memory_width, heads)?,
            ln3: Norm::new(join(&name, "ln3"), width)?,
            ff: FeedForward::new(&name, width, ff_width)?,
            name,
            width,
            memory_width,
            heads,
            ff_width,
        })
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bindings,
        x: Var,
        memory: Var,
        self_mask: Option<&Tensor<R>>,
    ) -> Result<Var, NnError> {
        let got = *tape.shape(memory).last().unwrap_or(&0);
        if got != self.memory_width {
            return Err(NnError::Width { layer: join(&self.name, "cross"), expected: self.memory_width, got });
        }
        let n1 = self.ln1.forward(tape, p, x)?;
        let a = self.self_attn.forward(tape, p, n1, n1, self_mask)?;
        let h1 = tape.add(x, a)?;
        let n2 = self.ln2.forward(tape, p, h1)?;
        let c = self.cross_attn.forward(tape, p, n2, memory, None)?;
        let h2 = tape.add(h1, c)?;
        let n3 = self.ln3.forward(tape, p, h2)?;
        let f = self.ff.forward(tape, p, n3)?;
        Ok(tape.add(h2, f)?)
    }
}

impl LayerSpec for DecoderBlock {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.ln1.decls();
        d.extend(self.self_attn.decls());
        d.extend(self.ln2.decls());
        d.extend(self.cross_attn.decls());
        d.extend(self.ln3.decls());
        d.extend(self.ff.decls());
        d
    }
}
