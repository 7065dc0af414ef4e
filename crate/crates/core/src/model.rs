//! Dense classifier with a frozen head, analytic gradients and its
//! first-order (NTK) linearization.
//!
//! The trainable parameters are the backbone layers only when the head is
//! frozen. All derivative products are computed per sample without
//! materializing the Jacobian: [`Model::jvp`] pushes a parameter-space tangent
//! forward, [`Model::vjp`] pulls a logit-space cotangent back. The linearized
//! model `f(x; θ₀) + J(x; θ₀)·τ` is built from those two primitives.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{ParamLayout, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// No nonlinearity. A single hidden layer with this activation makes the
    /// logits an affine function of the trainable parameters.
    #[serde(alias = "linear")]
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    /// Use a fixed nearest-centroid head instead of a trainable output layer.
    pub head_frozen: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64],
            num_classes: 10,
            activation: Activation::Relu,
            head_frozen: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("model.input_dim must be positive".to_string());
        }
        if self.num_classes == 0 {
            problems.push("model.num_classes must be positive".to_string());
        }
        if self.hidden_dims.contains(&0) {
            problems.push("model.hidden_dims entries must be positive".to_string());
        }
        if self.head_frozen && self.hidden_dims.is_empty() {
            problems.push(
                "model.hidden_dims must be non-empty when the head is frozen (no trainable parameters)"
                    .to_string(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Width of the representation fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// Trainable parameter layout; the head is included only when not frozen.
    pub fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        let mut fan_in = self.input_dim;
        for (l, &h) in self.hidden_dims.iter().enumerate() {
            layout.push(format!("layer{l}.weight"), h, fan_in);
            layout.push(format!("layer{l}.bias"), h, 1);
            fan_in = h;
        }
        if !self.head_frozen {
            layout.push("head.weight", self.num_classes, fan_in);
            layout.push("head.bias", self.num_classes, 1);
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

/// The fixed classification head. Never touched by training.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead {
    num_classes: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FrozenHead {
    /// `weights` is `num_classes × feature_dim`, row-major.
    pub fn new(num_classes: usize, feature_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != num_classes * feature_dim {
            return Err(Error::dim(num_classes * feature_dim, weights.len()));
        }
        if bias.len() != num_classes {
            return Err(Error::dim(num_classes, bias.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("frozen head has non-finite entries".into()));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    /// Nearest-centroid head: row `c` is the centered class centroid `μ_c − μ̄`
    /// and the bias is `−½‖μ_c − μ̄‖²`, so `argmax` picks the closest centroid.
    pub fn from_centroids(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::dim(features.rows, labels.len()));
        }
        let f = features.cols;
        let mut sums = vec![0.0; num_classes * f];
        let mut counts = vec![0usize; num_classes];
        for (s, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Argument(format!("label {y} out of range")));
            }
            counts[y] += 1;
            for (acc, v) in sums[y * f..(y + 1) * f].iter_mut().zip(features.row(s)) {
                *acc += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Degenerate(format!(
                "class {c} has no samples to build a centroid from"
            )));
        }
        for (c, &n) in counts.iter().enumerate() {
            for v in &mut sums[c * f..(c + 1) * f] {
                *v /= n as f64;
            }
        }
        let mut mean = vec![0.0; f];
        for c in 0..num_classes {
            for (m, v) in mean.iter_mut().zip(&sums[c * f..(c + 1) * f]) {
                *m += v / num_classes as f64;
            }
        }
        let mut bias = vec![0.0; num_classes];
        for c in 0..num_classes {
            let row = &mut sums[c * f..(c + 1) * f];
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
            bias[c] = -0.5 * row.iter().map(|v| v * v).sum::<f64>();
        }
        FrozenHead::new(num_classes, f, sums, bias)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Dense row-major matrix, used for logits and features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// A set of labelled inputs, `n × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Degenerate("batch must contain at least one sample".into()));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::dim(labels.len() * input_dim, inputs.len()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("batch inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.input_dim..(s + 1) * self.input_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Per-sample Jacobian of the logits, `n × num_classes × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub samples: usize,
    pub classes: usize,
    pub params: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn row(&self, sample: usize, class: usize) -> &[f64] {
        let start = (sample * self.classes + class) * self.params;
        &self.data[start..start + self.params]
    }

    pub fn get(&self, sample: usize, class: usize, param: usize) -> f64 {
        self.row(sample, class)[param]
    }

    /// `J · τ` for every sample and class.
    pub fn apply(&self, tau: &[f64]) -> Result<Matrix> {
        if tau.len() != self.params {
            return Err(Error::dim(self.params, tau.len()));
        }
        let mut out = Matrix::zeros(self.samples, self.classes);
        for s in 0..self.samples {
            for c in 0..self.classes {
                out.data[s * self.classes + c] = dot(self.row(s, c), tau);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Trainable { weight: Range<usize>, bias: Range<usize> },
    Head,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    params: Params,
    activated: bool,
}

/// A model specification bound to its head and parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: ParamLayout,
    layers: Vec<Layer>,
    head: Option<FrozenHead>,
}

/// Per-sample forward pass record: pre-activations and outputs of each layer.
struct Trace {
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl Model {
    /// Builds a model. A frozen-head spec starts with an all-zero head; install
    /// a real one with [`Model::with_head`] or [`Model::fit_centroid_head`].
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        let segs = layout.segments();
        for (l, &h) in spec.hidden_dims.iter().enumerate() {
            layers.push(Layer {
                fan_in,
                fan_out: h,
                params: Params::Trainable {
                    weight: segs[2 * l].range(),
                    bias: segs[2 * l + 1].range(),
                },
                activated: true,
            });
            fan_in = h;
        }
        let head_params = if spec.head_frozen {
            Params::Head
        } else {
            let n = segs.len();
            Params::Trainable {
                weight: segs[n - 2].range(),
                bias: segs[n - 1].range(),
            }
        };
        layers.push(Layer {
            fan_in,
            fan_out: spec.num_classes,
            params: head_params,
            activated: false,
        });
        let head = spec
            .head_frozen
            .then(|| FrozenHead::zeros(spec.num_classes, spec.feature_dim()));
        Ok(Self {
            spec,
            layout,
            layers,
            head,
        })
    }

    pub fn with_head(mut self, head: FrozenHead) -> Result<Self> {
        self.set_head(head)?;
        Ok(self)
    }

    pub fn set_head(&mut self, head: FrozenHead) -> Result<()> {
        if !self.spec.head_frozen {
            return Err(Error::Contract(
                "cannot install a frozen head on a model whose head is trainable".into(),
            ));
        }
        if head.num_classes != self.spec.num_classes {
            return Err(Error::dim(self.spec.num_classes, head.num_classes));
        }
        if head.feature_dim != self.spec.feature_dim() {
            return Err(Error::dim(self.spec.feature_dim(), head.feature_dim));
        }
        self.head = Some(head);
        Ok(())
    }

    /// Replaces the frozen head with class centroids of `batch`'s features at `theta`.
    pub fn fit_centroid_head(&mut self, theta: &ParamVector, batch: &Batch) -> Result<()> {
        let feats = self.features(theta, batch)?;
        let head = FrozenHead::from_centroids(&feats, batch.labels(), self.spec.num_classes)?;
        self.set_head(head)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> Option<&FrozenHead> {
        self.head.as_ref()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Trainable parameter count `d`.
    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// He/Glorot-scaled Gaussian weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut theta = vec![0.0; self.dim()];
        for layer in &self.layers {
            if let Params::Trainable { weight, .. } = &layer.params {
                let gain = if layer.activated && self.spec.activation == Activation::Relu {
                    2.0
                } else {
                    1.0
                };
                let std = (gain / layer.fan_in as f64).sqrt();
                for w in &mut theta[weight.clone()] {
                    let z: f64 = StandardNormal.sample(rng);
                    *w = std * z;
                }
            }
        }
        ParamVector::new(theta).expect("finite initialization")
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::dim(self.dim(), theta.len()));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.input_dim() != self.spec.input_dim {
            return Err(Error::dim(self.spec.input_dim, batch.input_dim()));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::Argument(format!(
                "label {y} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn weights<'a>(&'a self, theta: &'a [f64], layer: &Layer) -> (&'a [f64], &'a [f64]) {
        match &layer.params {
            Params::Trainable { weight, bias } => (&theta[weight.clone()], &theta[bias.clone()]),
            Params::Head => {
                let head = self.head.as_ref().expect("frozen head present");
                (&head.weights, &head.bias)
            }
        }
    }

    fn trace(&self, theta: &[f64], x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = out.last().map_or(x, |v| v.as_slice());
            let (w, b) = self.weights(theta, layer);
            let z: Vec<f64> = (0..layer.fan_out)
                .map(|j| b[j] + dot(&w[j * layer.fan_in..(j + 1) * layer.fan_in], input))
                .collect();
            let a = if layer.activated {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            out.push(a);
        }
        Trace { pre, out }
    }

    /// Logits `f(x; θ)` for each sample.
    pub fn forward(&self, theta: &ParamVector, batch: &Batch) -> Result<Matrix> {
        self.check_theta(theta.as_slice())?;
        self.check_batch(batch)?;
        Ok(self.forward_raw(theta.as_slice(), batch))
    }

    fn forward_raw(&self, theta: &[f64], batch: &Batch) -> Matrix {
        let c = self.spec.num_classes;
        let mut logits = Matrix::zeros(batch.len(), c);
        for s in 0..batch.len() {
            let t = self.trace(theta, batch.input(s));
            logits.row_mut(s).copy_from_slice(t.out.last().expect("head layer"));
        }
        logits
    }

    /// Backbone output (the head's input) for each sample.
    pub fn features(&self, theta: &ParamVector, batch: &Batch) -> Result<Matrix> {
        self.check_theta(theta.as_slice())?;
        self.check_batch(batch)?;
        let f = self.spec.feature_dim();
        let mut feats = Matrix::zeros(batch.len(), f);
        for s in 0..batch.len() {
            let t = self.trace(theta.as_slice(), batch.input(s));
            let n = t.out.len();
            let row = if n >= 2 { t.out[n - 2].as_slice() } else { batch.input(s) };
            feats.row_mut(s).copy_from_slice(row);
        }
        Ok(feats)
    }

    /// Forward-mode product: returns `(f(x; θ), J(x; θ)·tangent)` per sample.
    pub fn jvp(&self, theta: &ParamVector, tangent: &ParamVector, batch: &Batch) -> Result<(Matrix, Matrix)> {
        self.check_theta(theta.as_slice())?;
        self.check_theta(tangent.as_slice())?;
        self.check_batch(batch)?;
        Ok(self.jvp_raw(theta.as_slice(), tangent.as_slice(), batch))
    }

    fn jvp_raw(&self, theta: &[f64], tangent: &[f64], batch: &Batch) -> (Matrix, Matrix) {
        let c = self.spec.num_classes;
        let mut value = Matrix::zeros(batch.len(), c);
        let mut deriv = Matrix::zeros(batch.len(), c);
        for s in 0..batch.len() {
            let x = batch.input(s);
            let mut a: Vec<f64> = x.to_vec();
            let mut da: Vec<f64> = vec![0.0; x.len()];
            for layer in &self.layers {
                let (w, b) = self.weights(theta, layer);
                let (dw, db) = match &layer.params {
                    Params::Trainable { weight, bias } => {
                        (Some(&tangent[weight.clone()]), Some(&tangent[bias.clone()]))
                    }
                    Params::Head => (None, None),
                };
                let mut z = vec![0.0; layer.fan_out];
                let mut dz = vec![0.0; layer.fan_out];
                for j in 0..layer.fan_out {
                    let row = j * layer.fan_in..(j + 1) * layer.fan_in;
                    z[j] = b[j] + dot(&w[row.clone()], &a);
                    let mut t = dot(&w[row.clone()], &da);
                    if let (Some(dw), Some(db)) = (dw, db) {
                        t += dot(&dw[row], &a) + db[j];
                    }
                    dz[j] = t;
                }
                if layer.activated {
                    let act = self.spec.activation;
                    for j in 0..layer.fan_out {
                        let out = act.apply(z[j]);
                        dz[j] *= act.derivative(z[j], out);
                        z[j] = out;
                    }
                }
                a = z;
                da = dz;
            }
            value.row_mut(s).copy_from_slice(&a);
            deriv.row_mut(s).copy_from_slice(&da);
        }
        (value, deriv)
    }

    /// Reverse-mode product: `Σ_s J(x_s; θ)ᵀ · cotangent_s`.
    pub fn vjp(&self, theta: &ParamVector, batch: &Batch, cotangent: &Matrix) -> Result<ParamVector> {
        self.check_theta(theta.as_slice())?;
        self.check_batch(batch)?;
        if cotangent.rows != batch.len() || cotangent.cols != self.spec.num_classes {
            return Err(Error::dim(batch.len() * self.spec.num_classes, cotangent.data.len()));
        }
        ParamVector::from_computed(self.vjp_raw(theta.as_slice(), batch, cotangent))
    }

    fn vjp_raw(&self, theta: &[f64], batch: &Batch, cotangent: &Matrix) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        for s in 0..batch.len() {
            let x = batch.input(s);
            let trace = self.trace(theta, x);
            let mut upstream = cotangent.row(s).to_vec();
            for (l, layer) in self.layers.iter().enumerate().rev() {
                let input = if l == 0 { x } else { trace.out[l - 1].as_slice() };
                let mut delta = upstream;
                if layer.activated {
                    let act = self.spec.activation;
                    for (j, d) in delta.iter_mut().enumerate() {
                        *d *= act.derivative(trace.pre[l][j], trace.out[l][j]);
                    }
                }
                if let Params::Trainable { weight, bias } = &layer.params {
                    let gw = &mut grad[weight.clone()];
                    for (j, &d) in delta.iter().enumerate() {
                        if d != 0.0 {
                            for (g, xi) in gw[j * layer.fan_in..(j + 1) * layer.fan_in]
                                .iter_mut()
                                .zip(input)
                            {
                                *g += d * xi;
                            }
                        }
                    }
                    for (g, d) in grad[bias.clone()].iter_mut().zip(&delta) {
                        *g += d;
                    }
                }
                if l == 0 {
                    break;
                }
                let (w, _) = self.weights(theta, layer);
                let mut next = vec![0.0; layer.fan_in];
                for (j, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (n, wi) in next
                            .iter_mut()
                            .zip(&w[j * layer.fan_in..(j + 1) * layer.fan_in])
                        {
                            *n += d * wi;
                        }
                    }
                }
                upstream = next;
            }
        }
        grad
    }

    /// Mean softmax cross-entropy and its gradient with respect to the trainable parameters.
    pub fn loss_and_grad(&self, theta: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check_theta(theta.as_slice())?;
        self.check_batch(batch)?;
        let logits = self.forward_raw(theta.as_slice(), batch);
        let (loss, cot) = cross_entropy(&logits, batch.labels());
        let grad = ParamVector::from_computed(self.vjp_raw(theta.as_slice(), batch, &cot))?;
        Ok((loss, grad))
    }

    pub fn loss(&self, theta: &ParamVector, batch: &Batch) -> Result<f64> {
        let logits = self.forward(theta, batch)?;
        Ok(cross_entropy(&logits, batch.labels()).0)
    }

    /// Full per-sample Jacobian at `theta_0`, one reverse pass per (sample, class).
    pub fn jacobian_at(&self, theta_0: &ParamVector, batch: &Batch) -> Result<Jacobian> {
        self.check_theta(theta_0.as_slice())?;
        self.check_batch(batch)?;
        let c = self.spec.num_classes;
        let d = self.dim();
        let mut data = Vec::with_capacity(batch.len() * c * d);
        for s in 0..batch.len() {
            let single = Batch {
                inputs: batch.input(s).to_vec(),
                labels: vec![batch.labels()[s]],
                input_dim: batch.input_dim(),
            };
            for class in 0..c {
                let mut cot = Matrix::zeros(1, c);
                cot.data[class] = 1.0;
                data.extend(self.vjp_raw(theta_0.as_slice(), &single, &cot));
            }
        }
        Ok(Jacobian {
            samples: batch.len(),
            classes: c,
            params: d,
            data,
        })
    }

    /// Logits of the first-order expansion `f(x; θ₀) + J(x; θ₀)·τ`.
    pub fn linearized_forward(&self, theta_0: &ParamVector, tau: &ParamVector, batch: &Batch) -> Result<Matrix> {
        let (mut value, deriv) = self.jvp(theta_0, tau, batch)?;
        for (v, d) in value.data.iter_mut().zip(&deriv.data) {
            *v += d;
        }
        Ok(value)
    }

    /// Cross-entropy of the linearized model and its gradient with respect to `τ`
    /// (`θ₀` and the Jacobian held fixed).
    pub fn linearized_loss_and_grad(
        &self,
        theta_0: &ParamVector,
        tau: &ParamVector,
        batch: &Batch,
    ) -> Result<(f64, ParamVector)> {
        let logits = self.linearized_forward(theta_0, tau, batch)?;
        let (loss, cot) = cross_entropy(&logits, batch.labels());
        let grad = ParamVector::from_computed(self.vjp_raw(theta_0.as_slice(), batch, &cot))?;
        Ok((loss, grad))
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = logits
            .argmax_rows()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean softmax cross-entropy and `∂loss/∂logits`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(s);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_z).exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    (loss / n, grad)
}
