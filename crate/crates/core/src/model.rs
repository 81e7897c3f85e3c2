//! MLP encoder (whose last layer is the embedding layer) and MLP projection
//! head (whose last layer is the projection layer).
//!
//! `h = encoder(x)` and `z = projection(h)`. The encoder applies ReLU after
//! every layer, so embeddings are non-negative. The head is
//! linear → ReLU → linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Gradients, Tape, Tensor, Var};
use crate::error::{CclError, Result};

/// Layer widths of the encoder and the projection head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelWidths {
    /// `input → hidden… → embedding`.
    pub encoder: Vec<usize>,
    /// `embedding → hidden → projection`.
    pub projection: Vec<usize>,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            encoder: vec![16, 64, 64, 32],
            projection: vec![32, 32, 16],
        }
    }
}

impl ModelWidths {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() < 2 {
            return Err(CclError::Config(
                "encoder widths need at least an input and an output width".into(),
            ));
        }
        if self.projection.len() < 2 {
            return Err(CclError::Config(
                "projection widths need at least an input and an output width".into(),
            ));
        }
        if self.encoder.iter().chain(&self.projection).any(|&w| w == 0) {
            return Err(CclError::Config("layer widths must be positive".into()));
        }
        let d_h = *self.encoder.last().unwrap();
        if self.projection[0] != d_h {
            return Err(CclError::Config(format!(
                "projection input width {} must equal embedding width {d_h}",
                self.projection[0]
            )));
        }
        if *self.projection.last().unwrap() > d_h {
            return Err(CclError::Config(
                "projection width must not exceed embedding width".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder.last().unwrap()
    }

    pub fn projection_dim(&self) -> usize {
        *self.projection.last().unwrap()
    }
}

/// One affine layer: `y = x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
        let bias = Tensor::matrix(1, fan_out, draw(fan_out)).expect("shape");
        Linear { weight, bias }
    }
}

/// A stack of [`Linear`] layers with ReLU between them, and optionally after
/// the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    relu_output: bool,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, relu_output: bool) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(CclError::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (fi, fo) = l.weight.dims2()?;
            if l.bias.shape() != [1, fo] {
                return Err(CclError::dim("mlp bias", l.weight.shape(), l.bias.shape()));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weight.dims2()?.0 != fo {
                    return Err(CclError::dim(
                        "mlp chain",
                        l.weight.shape(),
                        next.weight.shape(),
                    ));
                }
            }
            if !l.weight.is_finite() || !l.bias.is_finite() || fi == 0 {
                return Err(CclError::Config(format!("layer {i} is degenerate")));
            }
        }
        Ok(Mlp {
            layers,
            relu_output,
        })
    }

    fn init(widths: &[usize], relu_output: bool, rng: &mut impl Rng) -> Mlp {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            relu_output,
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn relu_output(&self) -> bool {
        self.relu_output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    fn activate(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_output
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = ops::add_row(&ops::matmul(&cur, &l.weight)?, &l.bias)?;
            if self.activate(i) {
                cur = ops::relu(&cur);
            }
        }
        Ok(cur)
    }

    fn register(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut cur = x;
        for (i, &(w, b)) in vars.iter().enumerate() {
            let xw = tape.matmul(cur, w)?;
            cur = tape.add_row(xw, b)?;
            if self.activate(i) {
                cur = tape.relu(cur);
            }
        }
        Ok(cur)
    }

    fn sgd_step(&mut self, vars: &[(Var, Var)], grads: &Gradients, lr: f64) {
        for (l, &(w, b)) in self.layers.iter_mut().zip(vars) {
            for (param, var) in [(&mut l.weight, w), (&mut l.bias, b)] {
                if let Some(g) = grads.get(var) {
                    for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * d;
                    }
                }
            }
        }
    }
}

/// Encoder and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Mlp,
    pub projection: Mlp,
}

/// Tape handles for every parameter of a [`Model`], as `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>,
    pub projection: Vec<(Var, Var)>,
}

impl ModelVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.projection)
            .flat_map(|&(w, b)| [w, b])
    }
}

impl Model {
    /// Deterministic initialisation: every weight and bias is drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(seed: u64, widths: &ModelWidths) -> Result<Model> {
        widths.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(&widths.encoder, false, &mut rng);
        let projection = Mlp::init(&widths.projection, false, &mut rng);
        Ok(Model {
            encoder,
            projection,
        })
    }

    pub fn new(encoder: Mlp, projection: Mlp) -> Result<Model> {
        if encoder.output_dim() != projection.input_dim() {
            return Err(CclError::dim(
                "model",
                &[encoder.output_dim()],
                &[projection.input_dim()],
            ));
        }
        Ok(Model {
            encoder,
            projection,
        })
    }

    pub fn widths(&self) -> ModelWidths {
        let chain = |m: &Mlp| {
            let mut w = vec![m.input_dim()];
            w.extend(m.layers.iter().map(|l| l.weight.cols()));
            w
        };
        ModelWidths {
            encoder: chain(&self.encoder),
            projection: chain(&self.projection),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.register(tape),
            projection: self.projection.register(tape),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c) = x.dims2()?;
        if c != self.encoder.input_dim() {
            return Err(CclError::dim(
                "encode",
                x.shape(),
                &[self.encoder.input_dim()],
            ));
        }
        Ok(())
    }

    /// Embedding-layer features `h` on the tape.
    pub fn encode(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        self.encoder.forward_tape(tape, &vars.encoder, x)
    }

    /// Projection-layer features `z = G(h)` on the tape.
    pub fn project(&self, tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
        let (_, c) = tape.value(h).dims2()?;
        if c != self.projection.input_dim() {
            return Err(CclError::dim(
                "project",
                tape.shape(h),
                &[self.projection.input_dim()],
            ));
        }
        self.projection.forward_tape(tape, &vars.projection, h)
    }

    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.forward(x)
    }

    pub fn project_values(&self, h: &Tensor) -> Result<Tensor> {
        self.projection.forward(h)
    }

    /// `(h, z)` for a batch of inputs, without gradient tracking.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.encode_values(x)?;
        let z = self.project_values(&h)?;
        Ok((h, z))
    }

    /// Plain SGD update `p ← p − lr·∂L/∂p` for every parameter that received a
    /// gradient.
    pub fn sgd_step(&mut self, vars: &ModelVars, grads: &Gradients, lr: f64) {
        self.encoder.sgd_step(&vars.encoder, grads, lr);
        self.projection.sgd_step(&vars.projection, grads, lr);
    }

    /// All parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("encoder", &self.encoder), ("projection", &self.projection)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}
