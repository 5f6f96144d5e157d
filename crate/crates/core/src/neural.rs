//! Small dense networks with hand-written reverse-mode gradients.
//!
//! A forward pass that will be differentiated goes through
//! [`DenseNetwork::forward_trace`]; the returned [`ForwardTrace`] holds the
//! intermediates consumed by [`DenseNetwork::backward`]. Plain
//! [`DenseNetwork::forward`] keeps nothing.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("trace was not produced by a forward pass of this network")]
    TraceMismatch,
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Tanh,
        Activation::Relu,
        Activation::Sigmoid,
    ];

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    // derivative expressed through the pre-activation and the output
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `outputs x inputs`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<DVector<f64>>,
    pre_activations: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.output.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Parameter gradients shaped exactly like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub layers: Vec<LayerGradient>,
}

impl GradientRecord {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: DMatrix::zeros(l.outputs(), l.inputs()),
                    bias: DVector::zeros(l.outputs()),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientRecord) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| *v == 0.0))
    }

    fn matches(&self, net: &DenseNetwork) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.bias.len() == l.bias.len()
            })
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: GradientRecord,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Shape("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(NeuralError::Shape(format!(
                    "layer {i}: bias of {} for {} outputs",
                    l.bias.len(),
                    l.outputs()
                )));
            }
            if l.inputs() == 0 || l.outputs() == 0 {
                return Err(NeuralError::Shape(format!("layer {i} is empty")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NeuralError::Shape(format!(
                    "layer {i} emits {} values, layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        let net = Self { layers };
        if !net.params_finite() {
            return Err(NeuralError::NonFinite("parameters"));
        }
        Ok(net)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `sizes` lists every layer width from input to output; hidden layers use
    /// `hidden` and the last layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        if sizes.len() < 2 {
            return Err(NeuralError::Shape("need at least input and output sizes".into()));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-limit..=limit)
                    }),
                    bias: DVector::zeros(fan_out),
                    activation: if i == last { output } else { hidden },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Zeroes the last layer so every output equals `activation(0)`.
    pub fn zero_output_head(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        if x.len() != self.input_dim() {
            return Err(NeuralError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(x)?;
        let mut a = DVector::from_column_slice(x);
        for layer in &self.layers {
            let mut z = &layer.weights * &a + &layer.bias;
            z.apply(|v| *v = layer.activation.apply(*v));
            a = z;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("activation output"));
        }
        Ok(a.as_slice().to_vec())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace, NeuralError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = DVector::from_column_slice(x);
        for layer in &self.layers {
            let z = &layer.weights * &a + &layer.bias;
            let out = z.map(|v| layer.activation.apply(v));
            inputs.push(a);
            pre_activations.push(z);
            a = out;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("activation output"));
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            output: a,
        })
    }

    /// Gradients of `upstream · output` with respect to every parameter and the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Backward, NeuralError> {
        if trace.inputs.len() != self.layers.len()
            || trace
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.len() != l.inputs())
        {
            return Err(NeuralError::TraceMismatch);
        }
        if upstream.len() != self.output_dim() {
            return Err(NeuralError::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grad_out = DVector::from_column_slice(upstream);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre_activations[idx];
            let out = if idx + 1 == self.layers.len() {
                trace.output.clone()
            } else {
                trace.inputs[idx + 1].clone()
            };
            let delta = DVector::from_fn(pre.len(), |i, _| {
                grad_out[i] * layer.activation.derivative(pre[i], out[i])
            });
            let weights = &delta * trace.inputs[idx].transpose();
            grad_out = layer.weights.tr_mul(&delta);
            layers.push(LayerGradient {
                weights,
                bias: delta,
            });
        }
        layers.reverse();
        Ok(Backward {
            params: GradientRecord { layers },
            input: grad_out.as_slice().to_vec(),
        })
    }

    /// In-place `params ± rate * grads`.
    pub fn apply_gradient(
        &mut self,
        grads: &GradientRecord,
        rate: f64,
        direction: Direction,
    ) -> Result<(), NeuralError> {
        if !grads.matches(self) {
            return Err(NeuralError::Shape("gradient shapes differ from network".into()));
        }
        if !grads.is_finite() {
            return Err(NeuralError::NonFinite("gradients"));
        }
        let step = direction.sign() * rate;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights += &g.weights * step;
            layer.bias += &g.bias * step;
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, online: &DenseNetwork, tau: f64) -> Result<(), NeuralError> {
        if !self.same_shape(online) {
            return Err(NeuralError::Shape("soft update between different shapes".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weights.zip_apply(&o.weights, |a, b| *a = tau * b + (1.0 - tau) * *a);
            t.bias.zip_apply(&o.bias, |a, b| *a = tau * b + (1.0 - tau) * *a);
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &DenseNetwork) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.activation == b.activation
            })
    }

    /// Parameters in checkpoint order: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn shape_manifest(&self) -> ShapeManifest {
        ShapeManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dtype: "f64-le".to_string(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                })
                .collect(),
            parameters: self.param_count(),
        }
    }

    pub fn from_flat(manifest: &ShapeManifest, flat: &[f64]) -> Result<Self, NeuralError> {
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let expected: usize = manifest
            .layers
            .iter()
            .map(|l| l.inputs * l.outputs + l.outputs)
            .sum();
        if expected != flat.len() || expected != manifest.parameters {
            return Err(NeuralError::Checkpoint(format!(
                "manifest describes {expected} parameters, payload holds {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for shape in &manifest.layers {
            let nw = shape.inputs * shape.outputs;
            let weights =
                DMatrix::from_row_slice(shape.outputs, shape.inputs, &flat[offset..offset + nw]);
            offset += nw;
            let bias = DVector::from_column_slice(&flat[offset..offset + shape.outputs]);
            offset += shape.outputs;
            layers.push(DenseLayer {
                weights,
                bias,
                activation: shape.activation,
            });
        }
        Self::new(layers)
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), NeuralError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| NeuralError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let bytes: Vec<u8> = self.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(io(&bin))?;
        let manifest = serde_json::to_string_pretty(&self.shape_manifest())
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        fs::write(&json, manifest).map_err(io(&json))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, NeuralError> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let manifest_text = fs::read_to_string(&json).map_err(|source| NeuralError::Io {
            path: json.display().to_string(),
            source,
        })?;
        let manifest: ShapeManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let bytes = fs::read(&bin).map_err(|source| NeuralError::Io {
            path: bin.display().to_string(),
            source,
        })?;
        if bytes.len() % 8 != 0 {
            return Err(NeuralError::Checkpoint("payload is not a whole number of f64".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(&manifest, &flat)
    }
}

pub const CHECKPOINT_FORMAT: &str = "hdrl-dense";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub layers: Vec<LayerShape>,
    pub parameters: usize,
}

/// Plain gradient step, returning the updated network.
pub fn optimizer_step(
    net: &DenseNetwork,
    grads: &GradientRecord,
    rate: f64,
    direction: Direction,
) -> Result<DenseNetwork, NeuralError> {
    let mut next = net.clone();
    next.apply_gradient(grads, rate, direction)?;
    Ok(next)
}

/// `tau * online + (1 - tau) * target`, element-wise.
pub fn soft_update(
    target: &DenseNetwork,
    online: &DenseNetwork,
    tau: f64,
) -> Result<DenseNetwork, NeuralError> {
    let mut next = target.clone();
    next.soft_update_from(online, tau)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// The literal `phi <- phi ± rate * grad` update.
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Stateful wrapper that applies either update rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    moments: Option<(GradientRecord, GradientRecord)>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            moments: None,
            steps: 0,
        }
    }

    pub fn step(
        &mut self,
        net: &mut DenseNetwork,
        grads: &GradientRecord,
        rate: f64,
        direction: Direction,
    ) -> Result<(), NeuralError> {
        match self.kind {
            OptimizerKind::Sgd => net.apply_gradient(grads, rate, direction),
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if !grads.is_finite() {
                    return Err(NeuralError::NonFinite("gradients"));
                }
                let (m, v) = self.moments.get_or_insert_with(|| {
                    (GradientRecord::zeros_like(net), GradientRecord::zeros_like(net))
                });
                if !grads.matches(net) || !m.matches(net) {
                    return Err(NeuralError::Shape("gradient shapes differ from network".into()));
                }
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let mut update = GradientRecord::zeros_like(net);
                for (((ml, vl), gl), ul) in m
                    .layers
                    .iter_mut()
                    .zip(v.layers.iter_mut())
                    .zip(&grads.layers)
                    .zip(update.layers.iter_mut())
                {
                    let pairs = ml
                        .weights
                        .iter_mut()
                        .chain(ml.bias.iter_mut())
                        .zip(vl.weights.iter_mut().chain(vl.bias.iter_mut()))
                        .zip(gl.weights.iter().chain(gl.bias.iter()))
                        .zip(ul.weights.iter_mut().chain(ul.bias.iter_mut()));
                    for (((mi, vi), gi), ui) in pairs {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *ui = (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                }
                net.apply_gradient(&update, rate, direction)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: &[f64], rows: usize, cols: usize, b: &[f64], act: Activation) -> DenseNetwork {
        DenseNetwork::new(vec![DenseLayer {
            weights: DMatrix::from_row_slice(rows, cols, w),
            bias: DVector::from_column_slice(b),
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = linear(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0.0, 0.0], Activation::Identity);
        assert_eq!(net.forward(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn zero_weights_emit_activated_bias() {
        let net = linear(&[0.0, 0.0], 1, 2, &[0.5], Activation::Tanh);
        assert_eq!(net.forward(&[9.0, 9.0]).unwrap(), vec![0.5f64.tanh()]);
    }

    #[test]
    fn linear_weight_gradient_is_input() {
        let net = linear(&[2.0, -1.0], 1, 2, &[0.3], Activation::Identity);
        let trace = net.forward_trace(&[0.7, 1.5]).unwrap();
        let back = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(back.params.layers[0].weights.as_slice(), &[0.7, 1.5]);
        assert_eq!(back.params.layers[0].bias[0], 1.0);
        assert_eq!(back.input, vec![2.0, -1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNetwork::init(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let trace = net.forward_trace(&[0.1, 0.2, 0.3]).unwrap();
        assert!(net.backward(&trace, &[0.0, 0.0]).unwrap().params.is_zero());
    }

    #[test]
    fn shape_and_trace_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseNetwork::init(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let b = DenseNetwork::init(&[5, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(a.forward(&[1.0]), Err(NeuralError::Dimension { .. })));
        let trace = b.forward_trace(&[0.0; 5]).unwrap();
        assert!(matches!(a.backward(&trace, &[1.0, 1.0]), Err(NeuralError::TraceMismatch)));
        assert!(DenseNetwork::new(vec![
            DenseLayer { weights: DMatrix::zeros(2, 3), bias: DVector::zeros(2), activation: Activation::Tanh },
            DenseLayer { weights: DMatrix::zeros(1, 3), bias: DVector::zeros(1), activation: Activation::Tanh },
        ])
        .is_err());
        assert!(soft_update(&a, &b, 0.5).is_err());
    }

    #[test]
    fn forward_rejects_non_finite_output() {
        let net = linear(&[1.0], 1, 1, &[0.0], Activation::Identity);
        assert!(matches!(net.forward(&[f64::INFINITY]), Err(NeuralError::NonFinite(_))));
    }

    #[test]
    fn plain_steps() {
        let net = linear(&[1.0], 1, 1, &[0.0], Activation::Identity);
        let mut g = GradientRecord::zeros_like(&net);
        g.layers[0].weights[(0, 0)] = 2.0;
        let same = optimizer_step(&net, &g, 0.0, Direction::Descend).unwrap();
        assert_eq!(same, net);
        let down = optimizer_step(&net, &g, 0.1, Direction::Descend).unwrap();
        assert!((down.layers()[0].weights[(0, 0)] - 0.8).abs() < 1e-15);
        g.layers[0].bias[0] = f64::NAN;
        assert!(optimizer_step(&net, &g, 0.1, Direction::Descend).is_err());
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = DenseNetwork::init(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let o = DenseNetwork::init(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert_eq!(soft_update(&t, &o, 1.0).unwrap(), o);
        assert_eq!(soft_update(&t, &o, 0.0).unwrap(), t);
        let half = soft_update(&t, &o, 0.5).unwrap();
        for ((h, a), b) in half.to_flat().iter().zip(t.to_flat()).zip(o.to_flat()) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNetwork::init(&[4, 3, 2], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path(), "policy").unwrap();
        assert_eq!(DenseNetwork::load(dir.path(), "policy").unwrap(), net);
        fs::write(dir.path().join("policy.bin"), [0u8; 12]).unwrap();
        assert!(DenseNetwork::load(dir.path(), "policy").is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = DenseNetwork::init(&[5, 8, 2], Activation::Tanh, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = DenseNetwork::init(&[5, 8, 2], Activation::Tanh, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 13.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= limit));
    }
}
