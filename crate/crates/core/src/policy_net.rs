//! Small fully connected networks with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its weight matrix
//! row-major (`out × in`) followed by its bias. Hidden layers use `tanh`, the
//! output layer is linear. Gradients share the same flat layout, which keeps
//! the optimizer, norm clipping and checkpoints trivial.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub const HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_LR: f64 = 2.5e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation values of every layer for one input; input first.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

impl MlpParams {
    /// All-zero parameters for the given layer widths.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!("invalid layer sizes {sizes:?}")));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; count] })
    }

    /// Orthogonal weights scaled by `hidden_gain` (hidden layers) or
    /// `output_gain` (last layer), zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let gain = if l + 1 == layers { output_gain } else { hidden_gain };
            let w = orthogonal_matrix(rows, cols, rng);
            let off = net.weight_offset(l);
            for r in 0..rows {
                for c in 0..cols {
                    net.params[off + r * cols + c] = gain * w[(r, c)];
                }
            }
        }
        Ok(net)
    }

    /// input → 64 → 64 → actions; hidden gain √2, output gain 0.01.
    pub fn policy<R: Rng + ?Sized>(input: usize, actions: usize, rng: &mut R) -> Result<Self> {
        Self::orthogonal(&[input, HIDDEN_WIDTH, HIDDEN_WIDTH, actions], 2f64.sqrt(), 0.01, rng)
    }

    /// input → 64 → 64 → 1; hidden gain √2, output gain 1.
    pub fn critic<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Result<Self> {
        Self::orthogonal(&[input, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], 2f64.sqrt(), 1.0, rng)
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(&sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters for {sizes:?}, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weight_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).take(layer).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(Error::Contract(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.activations.pop().unwrap())
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[self.weight_offset(l)..];
            let (w, b) = (&w[..n_in * n_out], &w[n_in * n_out..n_in * n_out + n_out]);
            let x = activations.last().unwrap();
            let mut y: Vec<f64> = b.to_vec();
            for (r, yr) in y.iter_mut().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(y);
        }
        Ok(Trace { activations })
    }

    /// Accumulates ∂(output_grad · f(input))/∂θ into `grads`.
    pub fn backward_into(&self, trace: &Trace, output_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        if output_grad.len() != self.output_width() || grads.len() != self.params.len() {
            return Err(Error::Contract("gradient shape mismatch".into()));
        }
        let layers = self.num_layers();
        let mut delta = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.weight_offset(l);
            let x = &trace.activations[l];
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for r in 0..n_out {
                    let d = delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    gb[r] += d;
                    for (g, xi) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[r * n_in..(r + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            // tanh'(z) = 1 − tanh(z)²
            for (p, a) in prev.iter_mut().zip(x) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
        Ok(())
    }
}

fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let transpose = rows < cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let gauss = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if transpose {
        q.transpose()
    } else {
        q
    }
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    params.forward(input)
}

pub fn mlp_backward(params: &MlpParams, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>> {
    let trace = params.trace(input)?;
    let mut grads = vec![0.0; params.params.len()];
    params.backward_into(&trace, output_grad, &mut grads)?;
    Ok(grads)
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Samples `a ~ softmax(logits)`; returns `(a, log π(a))`.
pub fn categorical_sample<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> (usize, f64) {
    let logp = log_softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = logp.len() - 1;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            chosen = i;
            break;
        }
    }
    // rounding can leave the cumulative sum just under 1; never pick a zero-mass tail action
    while logp[chosen] == f64::NEG_INFINITY && chosen > 0 {
        chosen -= 1;
    }
    (chosen, logp[chosen])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, lr, beta1, beta2, eps: 1e-8 }
    }

    /// β₁ = β₂ = 0.9.
    pub fn with_lr(num_params: usize, lr: f64) -> Self {
        Self::new(num_params, lr, 0.9, 0.9)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Contract("adam shape mismatch".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"STOPMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic[8] | version u32 | layer-width count u32 | widths u64… |
/// params f64…`, all little-endian.
pub fn write_checkpoint<W: Write>(net: &MlpParams, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(net.sizes.len() as u32).to_le_bytes())?;
    for &s in &net.sizes {
        out.write_all(&(s as u64).to_le_bytes())?;
    }
    for p in &net.params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<MlpParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config("not a network checkpoint".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != CHECKPOINT_VERSION {
        return Err(Error::Config("unsupported checkpoint version".into()));
    }
    input.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    let mut sizes = Vec::with_capacity(n);
    let mut long = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut long)?;
        sizes.push(u64::from_le_bytes(long) as usize);
    }
    let mut net = MlpParams::zeros(&sizes).map_err(|e| Error::Config(e.to_string()))?;
    for p in net.params.iter_mut() {
        input.read_exact(&mut long)?;
        *p = f64::from_le_bytes(long);
    }
    Ok(net)
}
