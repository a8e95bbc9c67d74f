//! Minimal trainable models: dense feedforward networks, an LSTM cell with a
//! scalar regression head, MSE loss, Adam, and a finite-difference gradient
//! checker.

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

/// Inputs are expected in roughly `[-1, 1]`; debug builds reject anything
/// beyond this magnitude.
pub const FEATURE_LIMIT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss {loss} (batch of {batch} samples)")]
    NonFiniteLoss { loss: f64, batch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), NeuralError> {
    if expected == got {
        Ok(())
    } else {
        Err(NeuralError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

fn debug_check_features(x: ArrayView2<f64>) {
    debug_assert!(
        x.iter().all(|v| v.abs() <= FEATURE_LIMIT),
        "network input outside [-{FEATURE_LIMIT}, {FEATURE_LIMIT}]"
    );
}

/// Flat per-tensor gradients, ordered like [`Parameterized::param_tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub trait Parameterized {
    fn param_tensors(&self) -> Vec<&[f64]>;
    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    fn params_flat(&self) -> Vec<f64> {
        self.param_tensors().into_iter().flatten().copied().collect()
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        check_dim("parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    fn params_finite(&self) -> bool {
        self.param_tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A model with a scalar loss that can be differentiated analytically.
pub trait Differentiable: Parameterized {
    type Input: ?Sized;
    type Target: ?Sized;

    fn loss(&self, input: &Self::Input, target: &Self::Target) -> Result<f64, NeuralError>;
    fn loss_and_grad(
        &self,
        input: &Self::Input,
        target: &Self::Target,
    ) -> Result<(f64, Gradients), NeuralError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(out, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(out, |g, &a| *g *= 1.0 - a * a),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Uniform fan-in initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn uniform_fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`, row-major.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by a batched forward pass; `outputs[0]` is the input.
#[derive(Debug, Clone)]
pub struct DenseTrace {
    outputs: Vec<Array2<f64>>,
}

impl DenseTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trace holds at least the input")
    }
}

impl DenseNet {
    /// `sizes` lists every layer width including input and output, e.g. `[6, 512, 256, 1]`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::InvalidArchitecture(format!(
                "need at least two non-zero layer sizes, got {sizes:?}"
            )));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = uniform_fan_in(fan_out, fan_in, fan_in, rng);
                let bias = uniform_fan_in(1, fan_out, fan_in, rng).into_shape_with_order(fan_out).unwrap();
                DenseLayer {
                    weights,
                    bias,
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::InvalidArchitecture("no layers".into()));
        }
        for l in &layers {
            check_dim("bias length", l.weights.nrows(), l.bias.len())?;
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].weights.nrows(), pair[1].weights.ncols())?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(x)?.output().row(0).to_vec())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<DenseTrace, NeuralError> {
        check_dim("dense input", self.input_dim(), x.ncols())?;
        debug_check_features(x);
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for layer in &self.layers {
            let mut z = outputs.last().unwrap().dot(&layer.weights.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            outputs.push(z);
        }
        Ok(DenseTrace { outputs })
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network output)
    /// and returns parameter gradients plus the gradient w.r.t. the input.
    pub fn backward(&self, trace: &DenseTrace, d_out: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        let mut grads = vec![Vec::new(); 2 * self.layers.len()];
        let mut delta = d_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&trace.outputs[i + 1], &mut delta);
            let input = &trace.outputs[i];
            let dw = delta.t().dot(input);
            let db = delta.sum_axis(Axis(0));
            grads[2 * i] = dw.iter().copied().collect();
            grads[2 * i + 1] = db.to_vec();
            delta = delta.dot(&layer.weights);
        }
        (Gradients(grads), delta)
    }

    /// `theta <- tau * source + (1 - tau) * theta`.
    pub fn blend_from(&mut self, source: &DenseNet, tau: f64) {
        for (dst, src) in self.param_tensors_mut().into_iter().zip(source.param_tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NeuralError> {
        writeln!(out, "uavnet-dense v1")?;
        let sizes: Vec<String> = self.sizes().iter().map(usize::to_string).collect();
        writeln!(out, "sizes {}", sizes.join(" "))?;
        let acts: Vec<&str> = self.layers.iter().map(|l| l.activation.name()).collect();
        writeln!(out, "activations {}", acts.join(" "))?;
        for v in self.params_flat() {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(input: R) -> Result<Self, NeuralError> {
        let mut lines = input.lines();
        let mut next = || -> Result<String, NeuralError> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| NeuralError::Checkpoint("unexpected end of file".into()))
        };
        if next()? != "uavnet-dense v1" {
            return Err(NeuralError::Checkpoint("bad magic line".into()));
        }
        let sizes: Vec<usize> = parse_tagged(&next()?, "sizes")?;
        let acts_line = next()?;
        let acts: Vec<Activation> = acts_line
            .strip_prefix("activations ")
            .ok_or_else(|| NeuralError::Checkpoint("missing activations".into()))?
            .split_whitespace()
            .map(|a| Activation::parse(a).ok_or_else(|| NeuralError::Checkpoint(format!("unknown activation {a}"))))
            .collect::<Result<_, _>>()?;
        if acts.len() + 1 != sizes.len() {
            return Err(NeuralError::Checkpoint("activation count does not match sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .zip(&acts)
            .map(|(w, &activation)| DenseLayer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation,
            })
            .collect();
        let mut net = DenseNet::from_layers(layers)?;
        let flat = read_values(&mut next, net.num_params())?;
        net.set_params_flat(&flat)?;
        Ok(net)
    }
}

fn parse_tagged<T: std::str::FromStr>(line: &str, tag: &str) -> Result<Vec<T>, NeuralError> {
    line.strip_prefix(tag)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| NeuralError::Checkpoint(format!("missing {tag} line")))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| NeuralError::Checkpoint(format!("bad {tag} value {v}"))))
        .collect()
}

fn read_values(
    next: &mut impl FnMut() -> Result<String, NeuralError>,
    n: usize,
) -> Result<Vec<f64>, NeuralError> {
    (0..n)
        .map(|_| {
            let l = next()?;
            l.trim()
                .parse()
                .map_err(|_| NeuralError::Checkpoint(format!("bad parameter value {l}")))
        })
        .collect()
}

impl Parameterized for DenseNet {
    fn param_tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Mean over all elements of `(y - t)^2`, and its gradient w.r.t. `y`.
pub fn mse_with_grad(y: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let diff = &y - &t;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

impl Differentiable for DenseNet {
    type Input = Array2<f64>;
    type Target = Array2<f64>;

    fn loss(&self, input: &Array2<f64>, target: &Array2<f64>) -> Result<f64, NeuralError> {
        let trace = self.forward_batch(input.view())?;
        check_dim("target width", self.output_dim(), target.ncols())?;
        Ok(mse_with_grad(trace.output().view(), target.view()).0)
    }

    fn loss_and_grad(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
    ) -> Result<(f64, Gradients), NeuralError> {
        let trace = self.forward_batch(input.view())?;
        check_dim("target width", self.output_dim(), target.ncols())?;
        check_dim("target rows", input.nrows(), target.nrows())?;
        let (loss, d_out) = mse_with_grad(trace.output().view(), target.view());
        let (grads, _) = self.backward(&trace, d_out.view());
        Ok((loss, grads))
    }
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &Gradients) {
        let mut tensors = model.param_tensors_mut();
        assert_eq!(tensors.len(), grads.0.len(), "gradient tensor count");
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in tensors
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            assert_eq!(p.len(), g.len(), "gradient shape");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One MSE gradient step on a batch. Returns the pre-update loss.
pub fn train_step(
    net: &mut DenseNet,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    opt: &mut Adam,
) -> Result<f64, NeuralError> {
    if inputs.nrows() == 0 {
        return Err(NeuralError::EmptyBatch);
    }
    let (loss, grads) = net.loss_and_grad(inputs, targets)?;
    if !loss.is_finite() {
        return Err(NeuralError::NonFiniteLoss {
            loss,
            batch: inputs.nrows(),
        });
    }
    opt.apply(net, &grads);
    Ok(loss)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM cell with a linear scalar head on the final hidden state.
///
/// Gate rows in `weights` are stacked as input, forget, output, candidate;
/// columns are `[x, h_prev]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell {
    input_dim: usize,
    hidden_dim: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub head_weights: Array1<f64>,
    pub head_bias: Array1<f64>,
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LstmStep {
    z: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    o: Array1<f64>,
    g: Array1<f64>,
    c_prev: Array1<f64>,
    c: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct RecurrentTrace {
    steps: Vec<LstmStep>,
    pub hidden: Array1<f64>,
    pub prediction: f64,
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self, NeuralError> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(NeuralError::InvalidArchitecture("recurrent dims must be non-zero".into()));
        }
        let fan_in = input_dim + hidden_dim;
        let weights = uniform_fan_in(4 * hidden_dim, fan_in, fan_in, rng);
        let bias = uniform_fan_in(1, 4 * hidden_dim, fan_in, rng).into_shape_with_order(4 * hidden_dim).unwrap();
        let head_weights = uniform_fan_in(1, hidden_dim, hidden_dim, rng).into_shape_with_order(hidden_dim).unwrap();
        let head_bias = uniform_fan_in(1, 1, hidden_dim, rng).into_shape_with_order(1).unwrap();
        Ok(Self {
            input_dim,
            hidden_dim,
            weights,
            bias,
            head_weights,
            head_bias,
            hidden: Array1::zeros(hidden_dim),
            cell: Array1::zeros(hidden_dim),
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            weights: Array2::zeros((4 * hidden_dim, input_dim + hidden_dim)),
            bias: Array1::zeros(4 * hidden_dim),
            head_weights: Array1::zeros(hidden_dim),
            head_bias: Array1::zeros(1),
            hidden: Array1::zeros(hidden_dim),
            cell: Array1::zeros(hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn reset_state(&mut self) {
        self.hidden.fill(0.0);
        self.cell.fill(0.0);
    }

    /// Runs a sequence from a zero state and returns every intermediate
    /// needed for backpropagation through time.
    pub fn trace(&self, sequence: &[Vec<f64>]) -> Result<RecurrentTrace, NeuralError> {
        if sequence.is_empty() {
            return Err(NeuralError::EmptySequence);
        }
        let hd = self.hidden_dim;
        let mut h = Array1::zeros(hd);
        let mut c = Array1::<f64>::zeros(hd);
        let mut steps = Vec::with_capacity(sequence.len());
        for x in sequence {
            check_dim("recurrent input", self.input_dim, x.len())?;
            debug_assert!(x.iter().all(|v| v.abs() <= FEATURE_LIMIT), "recurrent input out of range");
            let mut z = Array1::zeros(self.input_dim + hd);
            z.slice_mut(s![..self.input_dim]).assign(&ArrayView1::from(x.as_slice()));
            z.slice_mut(s![self.input_dim..]).assign(&h);
            let a = self.weights.dot(&z) + &self.bias;
            let i = a.slice(s![..hd]).mapv(sigmoid);
            let f = a.slice(s![hd..2 * hd]).mapv(sigmoid);
            let o = a.slice(s![2 * hd..3 * hd]).mapv(sigmoid);
            let g = a.slice(s![3 * hd..]).mapv(f64::tanh);
            let c_next = &f * &c + &i * &g;
            h = &o * &c_next.mapv(f64::tanh);
            steps.push(LstmStep {
                z,
                i,
                f,
                o,
                g,
                c_prev: c,
                c: c_next.clone(),
            });
            c = c_next;
        }
        let prediction = self.head_weights.dot(&h) + self.head_bias[0];
        Ok(RecurrentTrace {
            steps,
            hidden: h,
            prediction,
        })
    }

    /// Processes an independent sequence: the state is reset first and the
    /// final state is retained on the cell.
    pub fn forward_sequence(&mut self, sequence: &[Vec<f64>]) -> Result<(Array1<f64>, f64), NeuralError> {
        self.reset_state();
        let trace = self.trace(sequence)?;
        self.hidden = trace.hidden.clone();
        self.cell = trace.steps.last().unwrap().c.clone();
        Ok((trace.hidden, trace.prediction))
    }

    pub fn predict(&self, sequence: &[Vec<f64>]) -> Result<f64, NeuralError> {
        Ok(self.trace(sequence)?.prediction)
    }

    /// Backpropagation through time for a gradient `d_pred` on the head output.
    pub fn backward(&self, trace: &RecurrentTrace, d_pred: f64) -> Gradients {
        let hd = self.hidden_dim;
        let mut dw = Array2::<f64>::zeros(self.weights.raw_dim());
        let mut db = Array1::<f64>::zeros(4 * hd);
        let d_head_w = &trace.hidden * d_pred;
        let mut dh = &self.head_weights * d_pred;
        let mut dc = Array1::<f64>::zeros(hd);
        for st in trace.steps.iter().rev() {
            let tanh_c = st.c.mapv(f64::tanh);
            let d_o = &dh * &tanh_c;
            dc = dc + &dh * &st.o * &tanh_c.mapv(|t| 1.0 - t * t);
            let d_i = &dc * &st.g;
            let d_g = &dc * &st.i;
            let d_f = &dc * &st.c_prev;
            let mut da = Array1::<f64>::zeros(4 * hd);
            da.slice_mut(s![..hd]).assign(&(&d_i * &st.i.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![hd..2 * hd]).assign(&(&d_f * &st.f.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![2 * hd..3 * hd]).assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![3 * hd..]).assign(&(&d_g * &st.g.mapv(|v| 1.0 - v * v)));
            for r in 0..4 * hd {
                let dar = da[r];
                if dar != 0.0 {
                    dw.row_mut(r).scaled_add(dar, &st.z);
                }
            }
            db += &da;
            let dz = self.weights.t().dot(&da);
            dh = dz.slice(s![self.input_dim..]).to_owned();
            dc = &dc * &st.f;
        }
        Gradients(vec![
            dw.into_raw_vec_and_offset().0,
            db.to_vec(),
            d_head_w.to_vec(),
            vec![d_pred],
        ])
    }

    /// One Adam step on the squared error of the head output. Returns the pre-update loss.
    pub fn train_step(&mut self, sequence: &[Vec<f64>], target: f64, opt: &mut Adam) -> Result<f64, NeuralError> {
        let (loss, grads) = self.loss_and_grad(sequence, &target)?;
        if !loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss { loss, batch: 1 });
        }
        opt.apply(self, &grads);
        Ok(loss)
    }

    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NeuralError> {
        writeln!(out, "uavnet-lstm v1")?;
        writeln!(out, "dims {} {}", self.input_dim, self.hidden_dim)?;
        for v in self.params_flat() {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(input: R) -> Result<Self, NeuralError> {
        let mut lines = input.lines();
        let mut next = || -> Result<String, NeuralError> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| NeuralError::Checkpoint("unexpected end of file".into()))
        };
        if next()? != "uavnet-lstm v1" {
            return Err(NeuralError::Checkpoint("bad magic line".into()));
        }
        let dims: Vec<usize> = parse_tagged(&next()?, "dims")?;
        if dims.len() != 2 || dims.contains(&0) {
            return Err(NeuralError::Checkpoint("dims line needs two non-zero values".into()));
        }
        let mut cell = RecurrentCell::zeros(dims[0], dims[1]);
        let flat = read_values(&mut next, cell.num_params())?;
        cell.set_params_flat(&flat)?;
        Ok(cell)
    }
}

impl Parameterized for RecurrentCell {
    fn param_tensors(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
            self.head_weights.as_slice().expect("standard layout"),
            self.head_bias.as_slice().expect("standard layout"),
        ]
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.head_weights.as_slice_mut().expect("standard layout"),
            self.head_bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl Differentiable for RecurrentCell {
    type Input = [Vec<f64>];
    type Target = f64;

    fn loss(&self, input: &[Vec<f64>], target: &f64) -> Result<f64, NeuralError> {
        let p = self.predict(input)?;
        Ok((p - target) * (p - target))
    }

    fn loss_and_grad(&self, input: &[Vec<f64>], target: &f64) -> Result<(f64, Gradients), NeuralError> {
        let trace = self.trace(input)?;
        let err = trace.prediction - target;
        Ok((err * err, self.backward(&trace, 2.0 * err)))
    }
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Below this magnitude gradients are compared by absolute difference.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// Largest discrepancy between backpropagated and central-difference
/// gradients over all parameters. Components where both gradients are below
/// [`GRAD_CHECK_ABS_FLOOR`] contribute their absolute error; all others their
/// relative error.
pub fn grad_check<M>(model: &M, input: &M::Input, target: &M::Target) -> Result<f64, NeuralError>
where
    M: Differentiable + Clone,
{
    let (_, grads) = model.loss_and_grad(input, target)?;
    let analytic = grads.flat();
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut worst = 0.0_f64;
    for (k, &a) in analytic.iter().enumerate() {
        params[k] = base[k] + GRAD_CHECK_STEP;
        probe.set_params_flat(&params)?;
        let up = probe.loss(input, target)?;
        params[k] = base[k] - GRAD_CHECK_STEP;
        probe.set_params_flat(&params)?;
        let down = probe.loss(input, target)?;
        params[k] = base[k];
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let scale = a.abs().max(numeric.abs());
        let err = if scale < GRAD_CHECK_ABS_FLOOR {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let mut net = DenseNet::new(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng(0)).unwrap();
        let zeros = vec![0.0; net.num_params()];
        net.set_params_flat(&zeros).unwrap();
        assert_eq!(net.forward(&[0.3, -0.2, 0.9]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = DenseNet::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward(&[0.1, -0.5, 0.7]).unwrap(), vec![0.1, -0.5, 0.7]);
    }

    #[test]
    fn hand_computed_two_two_one() {
        // h = relu([[1, -1], [0.5, 2]] x + [0, -1]); y = [2, -3] h + 0.5
        // x = (1, 0.5): h = relu(0.5, 0.5) = (0.5, 0.5); y = 1 - 1.5 + 0.5 = 0
        // x = (0.2, -0.4): h = relu(0.6, -1.7) = (0.6, 0); y = 1.2 + 0.5 = 1.7
        let net = DenseNet::from_layers(vec![
            DenseLayer {
                weights: array![[1.0, -1.0], [0.5, 2.0]],
                bias: array![0.0, -1.0],
                activation: Activation::Relu,
            },
            DenseLayer {
                weights: array![[2.0, -3.0]],
                bias: array![0.5],
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        assert!((net.forward(&[1.0, 0.5]).unwrap()[0] - 0.0).abs() < 1e-15);
        assert!((net.forward(&[0.2, -0.4]).unwrap()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = DenseNet::new(&[3, 4, 1], Activation::Relu, Activation::Identity, &mut rng(0)).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(NeuralError::DimensionMismatch { expected: 3, got: 2, .. })
        ));
        let cell = RecurrentCell::new(2, 3, &mut rng(0)).unwrap();
        assert!(matches!(cell.predict(&[vec![0.1]]), Err(NeuralError::DimensionMismatch { .. })));
        assert!(matches!(cell.predict(&[]), Err(NeuralError::EmptySequence)));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = DenseNet::new(&[2, 6, 1], Activation::Relu, Activation::Identity, &mut rng(4)).unwrap();
        let x = random_batch(&mut rng(5), 8, 2);
        let y = net.forward_batch(x.view()).unwrap().output().clone();
        let before = net.params_flat();
        let mut opt = Adam::default();
        let loss = train_step(&mut net, &x, &y, &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params_flat(), before);
    }

    #[test]
    fn linear_regression_converges() {
        let mut r = rng(21);
        let mut net = DenseNet::new(&[1, 16, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = random_batch(&mut r, 64, 1);
        let y = &x * 3.0;
        let mut opt = Adam::new(1e-2);
        let first = net.loss(&x, &y).unwrap();
        for _ in 0..500 {
            train_step(&mut net, &x, &y, &mut opt).unwrap();
        }
        let last = net.loss(&x, &y).unwrap();
        assert!(last * 100.0 <= first, "first {first} last {last}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let mut r = rng(3);
            let mut net = DenseNet::new(&[2, 8, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
            let x = random_batch(&mut r, 16, 2);
            let y = x.map_axis(Axis(1), |row| row[0] * row[1]).insert_axis(Axis(1));
            let mut opt = Adam::default();
            for _ in 0..50 {
                train_step(&mut net, &x, &y, &mut opt).unwrap();
            }
            net.params_flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parameters_stay_finite_over_long_training() {
        let mut r = rng(8);
        let mut net = DenseNet::new(&[3, 12, 1], Activation::Relu, Activation::Tanh, &mut r).unwrap();
        let mut opt = Adam::default();
        for _ in 0..10_000 {
            let x = random_batch(&mut r, 4, 3);
            let y = x.map_axis(Axis(1), |row| row.sum().sin()).insert_axis(Axis(1));
            train_step(&mut net, &x, &y, &mut opt).unwrap();
        }
        assert!(net.params_finite());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut net = DenseNet::new(&[1, 2, 1], Activation::Relu, Activation::Identity, &mut rng(0)).unwrap();
        let x = array![[0.5]];
        let y = array![[f64::NAN]];
        assert!(matches!(
            train_step(&mut net, &x, &y, &mut Adam::default()),
            Err(NeuralError::NonFiniteLoss { .. })
        ));
        assert!(matches!(
            train_step(&mut net, &Array2::zeros((0, 1)), &Array2::zeros((0, 1)), &mut Adam::default()),
            Err(NeuralError::EmptyBatch)
        ));
    }

    #[test]
    fn zero_recurrent_weights_give_zero_state() {
        let mut cell = RecurrentCell::zeros(2, 4);
        let seq = vec![vec![0.5, -0.3]; 5];
        let (h, p) = cell.forward_sequence(&seq).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert_eq!(p, 0.0);
    }

    #[test]
    fn constant_input_approaches_fixed_point() {
        let cell = RecurrentCell::new(1, 4, &mut rng(13)).unwrap();
        let seq = vec![vec![0.4]; 60];
        let states: Vec<Array1<f64>> = (1..=seq.len()).map(|n| cell.trace(&seq[..n]).unwrap().hidden).collect();
        let delta = |t: usize| (&states[t] - &states[t - 1]).mapv(f64::abs).sum();
        assert!(delta(59) < delta(2) * 1e-3, "early {} late {}", delta(2), delta(59));
    }

    #[test]
    fn hand_computed_one_dim_cell() {
        // Input gate weights on x = 1, candidate weight on x = 1, all else 0.
        // Step 1 (x = 0.5): i = f = o = sigmoid(.), with i = sigmoid(0.5), f = o = 0.5,
        //   g = tanh(0.5), c1 = i * g, h1 = 0.5 * tanh(c1).
        // Step 2 (x = -1): i = sigmoid(-1), g = tanh(-1), c2 = 0.5 * c1 + i * g.
        let mut cell = RecurrentCell::zeros(1, 1);
        cell.weights[[0, 0]] = 1.0;
        cell.weights[[3, 0]] = 1.0;
        cell.head_weights[0] = 2.0;
        let (h, p) = cell.forward_sequence(&[vec![0.5], vec![-1.0]]).unwrap();
        let c1 = sigmoid(0.5) * 0.5f64.tanh();
        let c2 = 0.5 * c1 + sigmoid(-1.0) * (-1.0f64).tanh();
        let h2 = 0.5 * c2.tanh();
        assert!((h[0] - h2).abs() < 1e-15);
        assert!((p - 2.0 * h2).abs() < 1e-15);
        assert!((cell.cell[0] - c2).abs() < 1e-15);
    }

    #[test]
    fn dense_gradient_check() {
        let mut r = rng(1);
        let net = DenseNet::new(&[4, 8, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = random_batch(&mut r, 5, 4);
        let y = random_batch(&mut r, 5, 1);
        assert!(grad_check(&net, &x, &y).unwrap() < 1e-4);
    }

    #[test]
    fn tanh_output_gradient_check() {
        let mut r = rng(2);
        let net = DenseNet::new(&[3, 6, 5, 2], Activation::Relu, Activation::Tanh, &mut r).unwrap();
        let x = random_batch(&mut r, 4, 3);
        let y = random_batch(&mut r, 4, 2);
        assert!(grad_check(&net, &x, &y).unwrap() < 1e-4);
    }

    #[test]
    fn recurrent_gradient_check() {
        let mut r = rng(3);
        let cell = RecurrentCell::new(2, 4, &mut r).unwrap();
        let seq: Vec<Vec<f64>> = (0..3).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        assert!(grad_check(&cell, &seq, &0.3).unwrap() < 1e-4);
    }

    #[test]
    fn zero_gradient_check_is_absolute() {
        let mut r = rng(4);
        let net = DenseNet::new(&[4, 8, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = random_batch(&mut r, 3, 4);
        let y = net.forward_batch(x.view()).unwrap().output().clone();
        assert!(grad_check(&net, &x, &y).unwrap() < 1e-8);
    }

    #[test]
    fn blend_moves_toward_source() {
        let mut a = DenseNet::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng(1)).unwrap();
        let b = DenseNet::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng(2)).unwrap();
        let a0 = a.params_flat();
        a.blend_from(&b, 0.25);
        for ((x, x0), y) in a.params_flat().iter().zip(&a0).zip(b.params_flat()) {
            assert!((x - (0.25 * y + 0.75 * x0)).abs() < 1e-15);
        }
        a.blend_from(&b, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_checkpoint_rejected() {
        assert!(DenseNet::load_checkpoint("nonsense\n".as_bytes()).is_err());
        assert!(DenseNet::load_checkpoint("uavnet-dense v1\nsizes 2 1\nactivations relu\n0.5\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dense_checkpoint_round_trips(seed in any::<u64>(), hidden in 1usize..12) {
            let net = DenseNet::new(&[3, hidden, 2], Activation::Relu, Activation::Tanh, &mut rng(seed)).unwrap();
            let mut buf = Vec::new();
            net.save_checkpoint(&mut buf).unwrap();
            let back = DenseNet::load_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back, net);
        }

        #[test]
        fn recurrent_checkpoint_round_trips(seed in any::<u64>(), hidden in 1usize..8) {
            let cell = RecurrentCell::new(2, hidden, &mut rng(seed)).unwrap();
            let mut buf = Vec::new();
            cell.save_checkpoint(&mut buf).unwrap();
            let back = RecurrentCell::load_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back.params_flat(), cell.params_flat());
        }
    }
}
