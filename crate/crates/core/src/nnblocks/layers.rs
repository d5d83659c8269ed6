use super::{join, Bindings, Init, LayerSpec, NnError, ParamDecl};
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Real;

/// Layernorm epsilon used by every block.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<R: Real>(self, tape: &mut Tape<R>, x: Var) -> Result<Var, NnError> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x)?,
            Activation::Gelu => tape.gelu(x)?,
            Activation::Sigmoid => tape.sigmoid(x)?,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Activation::Identity, Activation::Relu, Activation::Gelu, Activation::Sigmoid]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

fn nonzero(layer: &str, what: &str, v: usize) -> Result<(), NnError> {
    if v == 0 {
        return Err(NnError::spec(layer, format!("{what} must be positive")));
    }
    Ok(())
}

fn check_width(layer: &str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected != got {
        return Err(NnError::Width { layer: layer.to_string(), expected, got });
    }
    Ok(())
}

/// `y = act(x·W + b)` on a `(rows, input)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Result<Self, NnError> {
        let name = name.into();
        nonzero(&name, "input width", input)?;
        nonzero(&name, "output width", output)?;
        Ok(Self { name, input, output, activation, bias: true })
    }

    /// `y = x·W`, no bias.
    pub fn linear(name: impl Into<String>, input: usize, output: usize) -> Result<Self, NnError> {
        Ok(Self { bias: false, ..Self::new(name, input, output, Activation::Identity)? })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        let (rows, width) = match *tape.shape(x) {
            [r, w] => (r, w),
            [w] => (0, w),
            _ => return Err(NnError::spec(&self.name, format!("input must be a matrix, got {:?}", tape.shape(x)))),
        };
        check_width(&self.name, self.input, width)?;
        let w = p.get(&join(&self.name, "w"))?;
        let b = if self.bias { Some(p.get(&join(&self.name, "b"))?) } else { None };
        let y = if rows == 0 {
            let x2 = tape.reshape(x, &[1, width])?;
            let y = tape.matmul(x2, w)?;
            let y = tape.reshape(y, &[self.output])?;
            match b {
                Some(b) => tape.add(y, b)?,
                None => y,
            }
        } else {
            let y = tape.matmul(x, w)?;
            match b {
                Some(b) => {
                    let bb = tape.expand(b, rows)?;
                    tape.add(y, bb)?
                }
                None => y,
            }
        };
        self.activation.apply(tape, y)
    }
}

impl LayerSpec for Dense {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut d = vec![ParamDecl::new(
            join(&self.name, "w"),
            [self.input, self.output],
            Init::XavierUniform { fan_in: self.input, fan_out: self.output },
        )];
        if self.bias {
            d.push(ParamDecl::new(join(&self.name, "b"), [self.output], Init::Zeros));
        }
        d
    }
}

/// Layernorm over the last axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub name: String,
    pub width: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, width: usize) -> Result<Self, NnError> {
        let name = name.into();
        nonzero(&name, "width", width)?;
        Ok(Self { name, width })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        check_width(&self.name, self.width, *tape.shape(x).last().unwrap_or(&0))?;
        let g = p.get(&join(&self.name, "g"))?;
        let b = p.get(&join(&self.name, "b"))?;
        Ok(tape.layernorm(x, g, b, R::lit(NORM_EPS))?)
    }
}

impl LayerSpec for Norm {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new(join(&self.name, "g"), [self.width], Init::Ones),
            ParamDecl::new(join(&self.name, "b"), [self.width], Init::Zeros),
        ]
    }
}

/// Strided 1-D conv over a `(T, C_in)` sequence, activation, then an
/// optional layernorm over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dLayer {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    pub norm: Option<Norm>,
}

impl Conv1dLayer {
    pub fn new(
        name: impl Into<String>,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        norm: bool,
    ) -> Result<Self, NnError> {
        let name = name.into();
        for (what, v) in [("input width", input), ("output width", output), ("kernel", kernel), ("stride", stride)] {
            nonzero(&name, what, v)?;
        }
        let norm = if norm { Some(Norm::new(join(&name, "ln"), output)?) } else { None };
        Ok(Self { name, input, output, kernel, stride, activation, norm })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        check_width(&self.name, self.input, *tape.shape(x).last().unwrap_or(&0))?;
        let w = p.get(&join(&self.name, "w"))?;
        let b = p.get(&join(&self.name, "b"))?;
        let y = tape.conv1d(x, w, Some(b), self.stride)?;
        let y = self.activation.apply(tape, y)?;
        match &self.norm {
            Some(n) => n.forward(tape, p, y),
            None => Ok(y),
        }
    }
}

impl LayerSpec for Conv1dLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut d = vec![
            ParamDecl::new(
                join(&self.name, "w"),
                [self.kernel, self.input, self.output],
                Init::HeUniform { fan_in: self.kernel * self.input },
            ),
            ParamDecl::new(join(&self.name, "b"), [self.output], Init::Zeros),
        ];
        if let Some(n) = &self.norm {
            d.extend(n.decls());
        }
        d
    }
}

/// Strided 2-D conv over a `(C_in, H, W)` map followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub activation: Activation,
}

impl Conv2dLayer {
    pub fn new(
        name: impl Into<String>,
        input: usize,
        output: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        activation: Activation,
    ) -> Result<Self, NnError> {
        let name = name.into();
        for (what, v) in [
            ("input channels", input),
            ("output channels", output),
            ("kernel height", kernel.0),
            ("kernel width", kernel.1),
            ("stride", stride.0),
            ("stride", stride.1),
        ] {
            nonzero(&name, what, v)?;
        }
        Ok(Self { name, input, output, kernel, stride, activation })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        check_width(&self.name, self.input, *tape.shape(x).first().unwrap_or(&0))?;
        let w = p.get(&join(&self.name, "w"))?;
        let b = p.get(&join(&self.name, "b"))?;
        let y = tape.conv2d(x, w, Some(b), self.stride)?;
        self.activation.apply(tape, y)
    }

    /// Spatial extent after this layer.
    pub fn out_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))
    }
}

impl LayerSpec for Conv2dLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let (kh, kw) = self.kernel;
        vec![
            ParamDecl::new(
                join(&self.name, "w"),
                [self.output, self.input, kh, kw],
                Init::HeUniform { fan_in: self.input * kh * kw },
            ),
            ParamDecl::new(join(&self.name, "b"), [self.output], Init::Zeros),
        ]
    }
}

/// Token lookup table `(vocab, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, width: usize) -> Result<Self, NnError> {
        let name = name.into();
        nonzero(&name, "vocab", vocab)?;
        nonzero(&name, "width", width)?;
        Ok(Self { name, vocab, width })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, ids: &[usize]) -> Result<Var, NnError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(NnError::spec(&self.name, format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = p.get(&join(&self.name, "table"))?;
        Ok(tape.gather(table, ids)?)
    }
}

impl LayerSpec for Embedding {
    fn name(&self) -> &str {
        &self.name
    }

    fn decls(&self) -> Vec<ParamDecl> {
        vec![ParamDecl::new(
            join(&self.name, "table"),
            [self.vocab, self.width],
            Init::XavierUniform { fan_in: self.vocab, fan_out: self.width },
        )]
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<R: Real>(len: usize, width: usize) -> Tensor<R> {
    Tensor::from_fn([len, width], |k| {
        let (pos, j) = (k / width, k % width);
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / width as f64);
        R::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnblocks::{init_params, ParamStore};

    fn bind(tape: &mut Tape<f64>, store: &ParamStore) -> Bindings {
        Bindings::of(tape, store, true)
    }

    #[test]
    fn identity_dense_passes_input() {
        let d = Dense::new("d", 3, 3, Activation::Identity).unwrap();
        let mut s = ParamStore::new(0);
        s.insert("d.w", Tensor::eye(3)).unwrap();
        s.insert("d.b", Tensor::zeros([3])).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s);
        let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let xv = t.constant(x.clone());
        let y = d.forward(&mut t, &p, xv).unwrap();
        assert!(t.value(y).bit_eq(&x));
    }

    #[test]
    fn zero_weight_relu_gives_clamped_bias() {
        let d = Dense::new("d", 2, 3, Activation::Relu).unwrap();
        let mut s = ParamStore::new(0);
        s.insert("d.w", Tensor::zeros([2, 3])).unwrap();
        s.insert("d.b", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s);
        let x = t.constant(Tensor::full([4, 2], 7.0));
        let y = d.forward(&mut t, &p, x).unwrap();
        for r in 0..4 {
            assert_eq!(t.value(y).row(r), &[0.5, 0.0, 2.0]);
        }
    }

    #[test]
    fn dense_matches_hand_product() {
        let d = Dense::new("d", 3, 2, Activation::Identity).unwrap();
        let s: ParamStore = init_params(&d.decls(), 4).unwrap();
        let mut s2 = s.clone();
        s2.get_mut("d.b").unwrap().data_mut().copy_from_slice(&[0.25, -0.5]);
        let x = Tensor::new([2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s2);
        let xv = t.constant(x.clone());
        let y = d.forward(&mut t, &p, xv).unwrap();
        let w = s2.get("d.w").unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = [0.25, -0.5][j];
                for k in 0..3 {
                    acc += x.at2(i, k) * w.at2(k, j);
                }
                assert!((t.value(y).at2(i, j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_width_mismatch_rejected() {
        let d = Dense::new("enc.d", 3, 2, Activation::Identity).unwrap();
        let s: ParamStore = init_params(&d.decls(), 4).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s);
        let x = t.constant(Tensor::zeros([2, 4]));
        let err = d.forward(&mut t, &p, x).unwrap_err();
        assert!(matches!(err, NnError::Width { expected: 3, got: 4, .. }), "{err}");
    }

    #[test]
    fn zero_width_layer_rejected() {
        assert!(Dense::new("d", 0, 2, Activation::Relu).is_err());
        assert!(Conv1dLayer::new("c", 2, 2, 3, 0, Activation::Relu, false).is_err());
    }

    #[test]
    fn conv_stack_shapes() {
        let c = Conv1dLayer::new("c", 4, 6, 3, 2, Activation::Gelu, true).unwrap();
        let s: ParamStore = init_params(&c.decls(), 1).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s);
        let x = t.constant(Tensor::full([9, 4], 0.3));
        let y = c.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.shape(y), &[5, 6]);

        let c2 = Conv2dLayer::new("k", 1, 3, (3, 3), (2, 2), Activation::Relu).unwrap();
        let s2: ParamStore = init_params(&c2.decls(), 1).unwrap();
        let p2 = bind(&mut t, &s2);
        let m = t.constant(Tensor::full([1, 16, 32], 0.1));
        let z = c2.forward(&mut t, &p2, m).unwrap();
        assert_eq!(t.shape(z), &[3, 8, 16]);
        assert_eq!(c2.out_extent(16, 32), (8, 16));
    }

    #[test]
    fn positional_encoding_values() {
        let pe: Tensor = positional_encoding(3, 4);
        assert_eq!(pe.at2(0, 0), 0.0);
        assert_eq!(pe.at2(0, 1), 1.0);
        assert!((pe.at2(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.at2(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let e = Embedding::new("e", 5, 2).unwrap();
        let s: ParamStore = init_params(&e.decls(), 1).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &s);
        assert!(e.forward(&mut t, &p, &[1, 5]).is_err());
        let v = e.forward(&mut t, &p, &[4, 0]).unwrap();
        assert_eq!(t.value(v).row(0), s.get("e.table").unwrap().row(4));
    }
}
