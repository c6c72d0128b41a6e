//! The calibration network and its trainer.
//!
//! The `set_cnn` variant applies the same stack of affine + ReLU layers to
//! every support row (a kernel-size-1 convolution over the rows), max-pools
//! each channel over the valid rows and feeds the pooled vector, optionally
//! joined with image embeddings, to a small classifier. The `mlp` variant
//! replaces the shared row stack by dense layers over the flattened matrix.
//!
//! Gradients are derived by hand. All layer weights are stored fan-in major
//! (`w[i * fan_out + o]`), followed by the bias, layer after layer: feature
//! stage first, then the classifier. That flat order is also the checkpoint
//! payload order.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::error::NetworkError;
use crate::features::{FeatureMatrix, ImageEmbedding, FEATURE_WIDTH, SUPPORT_ROWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SetCnn,
    Mlp,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "set_cnn" => Ok(Self::SetCnn),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown architecture '{other}' (expected set_cnn or mlp)")),
        }
    }
}

/// How support rows are pooled.
///
/// `Masked` pools the valid rows only. `Literal` also pools the activation of
/// a zero padding row whenever the matrix has padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Masked,
    Literal,
}

impl std::str::FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked" => Ok(Self::Masked),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown pool mode '{other}' (expected masked or literal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub input_width: usize,
    pub max_rows: usize,
    /// Output widths of the feature stage.
    pub feature_widths: Vec<usize>,
    /// Hidden widths of the classifier.
    pub head_hidden: Vec<usize>,
    /// Width of each of the two image embeddings; 0 disables them.
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub pool: PoolMode,
}

impl Architecture {
    /// Pointwise stack 256/512/1024/2048 with a 1024-wide classifier layer.
    pub fn set_cnn() -> Self {
        Self {
            variant: Variant::SetCnn,
            input_width: FEATURE_WIDTH,
            max_rows: SUPPORT_ROWS,
            feature_widths: vec![256, 512, 1024, 2048],
            head_hidden: vec![1024],
            embedding_dim: 0,
            num_classes: NUM_CLASSES,
            pool: PoolMode::Masked,
        }
    }

    /// Three 2048-wide dense layers over the flattened matrix, then the
    /// output layer.
    pub fn mlp() -> Self {
        Self {
            variant: Variant::Mlp,
            feature_widths: vec![2048, 2048, 2048],
            head_hidden: vec![],
            ..Self::set_cnn()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::SetCnn => Self::set_cnn(),
            Variant::Mlp => Self::mlp(),
        }
    }

    fn feature_input_width(&self) -> usize {
        match self.variant {
            Variant::SetCnn => self.input_width,
            Variant::Mlp => self.max_rows * self.input_width,
        }
    }

    fn feature_output_width(&self) -> usize {
        *self.feature_widths.last().expect("validated nonempty")
    }

    pub fn classifier_input_width(&self) -> usize {
        self.feature_output_width() + 2 * self.embedding_dim
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Shape(m.to_string()));
        if self.feature_widths.is_empty() {
            return bad("feature stage needs at least one layer");
        }
        if self.input_width == 0 || self.max_rows == 0 || self.num_classes < 2 {
            return bad("input width, row count and class count must be positive");
        }
        if self.feature_widths.iter().chain(&self.head_hidden).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if self.checked_param_count().is_none() {
            return bad("parameter count overflows");
        }
        Ok(())
    }

    fn checked_param_count(&self) -> Option<usize> {
        let first = match self.variant {
            Variant::SetCnn => self.input_width,
            Variant::Mlp => self.max_rows.checked_mul(self.input_width)?,
        };
        let head_in = self
            .embedding_dim
            .checked_mul(2)?
            .checked_add(*self.feature_widths.last()?)?;
        let widths = self
            .feature_widths
            .iter()
            .chain(&self.head_hidden)
            .chain(std::iter::once(&self.num_classes));
        let mut fan_in = first;
        let mut total: usize = 0;
        for (i, &w) in widths.enumerate() {
            if i == self.feature_widths.len() {
                fan_in = head_in;
            }
            total = total.checked_add(fan_in.checked_mul(w)?.checked_add(w)?)?;
            fan_in = w;
        }
        Some(total)
    }

    /// Shapes of all layers in storage order.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        let mut offset = 0;
        let mut push = |fan_in: usize, fan_out: usize| {
            shapes.push(LayerShape {
                fan_in,
                fan_out,
                offset,
            });
            offset += fan_in * fan_out + fan_out;
        };
        let mut width = self.feature_input_width();
        for &w in &self.feature_widths {
            push(width, w);
            width = w;
        }
        width = self.classifier_input_width();
        for &w in &self.head_hidden {
            push(width, w);
            width = w;
        }
        push(width, self.num_classes);
        shapes
    }

    pub fn feature_layer_count(&self) -> usize {
        self.feature_widths.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .last()
            .map_or(0, |l| l.offset + l.fan_in * l.fan_out + l.fan_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Start of the weights in the flat parameter vector; the bias follows.
    pub offset: usize,
}

impl LayerShape {
    fn weights<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &values[start..start + self.fan_out]
    }

    fn split_mut<'a>(&self, values: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let n = self.fan_in * self.fan_out;
        values[self.offset..self.offset + n + self.fan_out].split_at_mut(n)
    }
}

/// All weights and biases of one model, in a single flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    arch: Architecture,
    layers: Vec<LayerShape>,
    values: Vec<f64>,
}

impl ModelParameters {
    /// Uniform weights in `±sqrt(3 / fan_in)` (variance `1 / fan_in`), zero
    /// biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NetworkError> {
        arch.validate()?;
        let layers = arch.layer_shapes();
        let mut values = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let bound = (3.0 / l.fan_in as f64).sqrt();
            let (w, _) = l.split_mut(&mut values);
            for v in w {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { arch, layers, values })
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self, NetworkError> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(NetworkError::Shape(format!(
                "architecture needs {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self {
            layers: arch.layer_shapes(),
            arch,
            values,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardOutput {
    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `n` rows of `fan_in` inputs through one affine layer, optional ReLU.
/// Zero inputs are skipped, which makes sparse one-hot rows cheap.
fn dense_forward(input: &[f64], layer: &LayerShape, values: &[f64], activate: bool) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let w = layer.weights(values);
    let b = layer.bias(values);
    let n = input.len() / fi;
    let mut out = Vec::with_capacity(n * fo);
    for row in input.chunks_exact(fi) {
        let start = out.len();
        out.extend_from_slice(b);
        let acc = &mut out[start..];
        for (i, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for (a, &wv) in acc.iter_mut().zip(&w[i * fo..(i + 1) * fo]) {
                    *a += x * wv;
                }
            }
        }
        if activate {
            acc.iter_mut().for_each(|a| *a = relu(*a));
        }
    }
    out
}

/// Intermediate values kept for the backward pass.
struct Trace {
    /// Feature-stage activations; `acts[0]` is the stage input.
    acts: Vec<Vec<f64>>,
    /// Pooled row that supplied each output channel, when pooling happened.
    argmax_rows: Option<Vec<usize>>,
    /// Classifier activations; `head[0]` is the classifier input.
    head: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_inputs(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
) -> Result<(), NetworkError> {
    let arch = &params.arch;
    if matrix.width() != arch.input_width {
        return Err(NetworkError::Shape(format!(
            "matrix width {} but model expects {}",
            matrix.width(),
            arch.input_width
        )));
    }
    if arch.variant == Variant::Mlp && matrix.rows() != arch.max_rows {
        return Err(NetworkError::Shape(format!(
            "mlp expects exactly {} rows, matrix has {}",
            arch.max_rows,
            matrix.rows()
        )));
    }
    match (arch.embedding_dim, emb) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(NetworkError::Shape(
            "embeddings supplied to a model without an embedding input".into(),
        )),
        (_, None) => Err(NetworkError::Shape("model requires image embeddings".into())),
        (d, Some(e)) if e.global_vec.len() != d || e.target_vec.len() != d => Err(NetworkError::Shape(format!(
            "embedding widths {}/{} but model expects {d}",
            e.global_vec.len(),
            e.target_vec.len()
        ))),
        _ => Ok(()),
    }
}

fn run_forward(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
) -> Result<Trace, NetworkError> {
    check_inputs(params, matrix, emb)?;
    let arch = &params.arch;
    let values = &params.values;
    let n_feature = arch.feature_layer_count();

    let stage_input = match arch.variant {
        Variant::SetCnn => {
            let mut rows = matrix.valid_data().to_vec();
            if arch.pool == PoolMode::Literal && matrix.valid_rows() < matrix.rows() {
                rows.resize(rows.len() + matrix.width(), 0.0);
            }
            rows
        }
        Variant::Mlp => matrix.to_dense(),
    };
    let mut acts = vec![stage_input];
    for layer in &params.layers[..n_feature] {
        let next = dense_forward(acts.last().unwrap(), layer, values, true);
        acts.push(next);
    }

    let out_w = arch.feature_output_width();
    let last = acts.last().unwrap();
    let (features, argmax_rows) = match arch.variant {
        Variant::Mlp => (last.clone(), None),
        Variant::SetCnn => {
            let n_rows = last.len() / out_w;
            if n_rows == 0 {
                (vec![0.0; out_w], None)
            } else {
                let mut pooled = last[..out_w].to_vec();
                let mut rows = vec![0usize; out_w];
                for r in 1..n_rows {
                    for (c, &v) in last[r * out_w..(r + 1) * out_w].iter().enumerate() {
                        if v > pooled[c] {
                            pooled[c] = v;
                            rows[c] = r;
                        }
                    }
                }
                (pooled, Some(rows))
            }
        }
    };

    let mut z = features;
    if let Some(e) = emb {
        z.extend_from_slice(&e.global_vec);
        z.extend_from_slice(&e.target_vec);
    }
    let head_layers = &params.layers[n_feature..];
    let mut head = vec![z];
    for (k, layer) in head_layers.iter().enumerate() {
        let activate = k + 1 < head_layers.len();
        let next = dense_forward(head.last().unwrap(), layer, values, activate);
        head.push(next);
    }
    let logits = head.pop().unwrap();
    Ok(Trace {
        acts,
        argmax_rows,
        head,
        logits,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn forward(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
) -> Result<ForwardOutput, NetworkError> {
    let trace = run_forward(params, matrix, emb)?;
    let probs = softmax(&trace.logits);
    Ok(ForwardOutput {
        logits: trace.logits,
        probs,
    })
}

/// Backpropagates `d_out` through one layer. Accumulates weight and bias
/// gradients into `grad` and returns the gradient with respect to `input`
/// when `want_input` is set. When `input_is_relu`, the returned gradient is
/// already masked by the ReLU that produced `input`.
fn dense_backward(
    input: &[f64],
    d_out: &[f64],
    layer: &LayerShape,
    values: &[f64],
    grad: &mut [f64],
    want_input: bool,
    input_is_relu: bool,
) -> Option<Vec<f64>> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let w = layer.weights(values);
    let (gw, gb) = layer.split_mut(grad);
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    for (r, (x_row, d_row)) in input.chunks_exact(fi).zip(d_out.chunks_exact(fo)).enumerate() {
        if d_row.iter().all(|&d| d == 0.0) {
            continue;
        }
        for (g, &d) in gb.iter_mut().zip(d_row) {
            *g += d;
        }
        for (i, &x) in x_row.iter().enumerate() {
            if x != 0.0 {
                for (g, &d) in gw[i * fo..(i + 1) * fo].iter_mut().zip(d_row) {
                    *g += x * d;
                }
            }
        }
        if let Some(d_in) = d_in.as_mut() {
            let d_in_row = &mut d_in[r * fi..(r + 1) * fi];
            for (i, slot) in d_in_row.iter_mut().enumerate() {
                if input_is_relu && x_row[i] <= 0.0 {
                    continue;
                }
                *slot = w[i * fo..(i + 1) * fo].iter().zip(d_row).map(|(&wv, &d)| wv * d).sum();
            }
        }
    }
    d_in
}

/// Adds the cross-entropy gradient for one example into `grad` and returns
/// its loss.
pub fn accumulate_gradient(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
    label: usize,
    grad: &mut [f64],
) -> Result<f64, NetworkError> {
    let arch = &params.arch;
    if label >= arch.num_classes {
        return Err(NetworkError::Label {
            label,
            num_classes: arch.num_classes,
        });
    }
    if grad.len() != params.values.len() {
        return Err(NetworkError::Shape("gradient buffer length".into()));
    }
    let trace = run_forward(params, matrix, emb)?;
    let loss = cross_entropy(&trace.logits, label);
    let mut delta = softmax(&trace.logits);
    delta[label] -= 1.0;

    let values = &params.values;
    let n_feature = arch.feature_layer_count();
    let head_layers = &params.layers[n_feature..];
    for k in (0..head_layers.len()).rev() {
        // the classifier input is either pooled ReLU output or raw embeddings;
        // masking happens below when routing back to the feature stage
        let input_is_relu = k > 0;
        delta = dense_backward(
            &trace.head[k],
            &delta,
            &head_layers[k],
            values,
            grad,
            true,
            input_is_relu,
        )
        .expect("input gradient requested");
    }

    let out_w = arch.feature_output_width();
    let last = trace.acts.last().unwrap();
    let mut d_act = vec![0.0; last.len()];
    match arch.variant {
        Variant::Mlp => d_act.copy_from_slice(&delta[..out_w]),
        Variant::SetCnn => match &trace.argmax_rows {
            None => return Ok(loss),
            Some(rows) => {
                for (c, &r) in rows.iter().enumerate() {
                    d_act[r * out_w + c] = delta[c];
                }
            }
        },
    }
    // ReLU mask of the last feature layer
    for (d, &a) in d_act.iter_mut().zip(last) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    for l in (0..n_feature).rev() {
        let want_input = l > 0;
        let next = dense_backward(
            &trace.acts[l],
            &d_act,
            &params.layers[l],
            values,
            grad,
            want_input,
            true,
        );
        match next {
            Some(d) => d_act = d,
            None => break,
        }
    }
    Ok(loss)
}

/// Loss and exact gradient for one example.
pub fn backward(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
    label: usize,
) -> Result<(Vec<f64>, f64), NetworkError> {
    let mut grad = vec![0.0; params.values.len()];
    let loss = accumulate_gradient(params, matrix, emb, label, &mut grad)?;
    Ok((grad, loss))
}

/// Cross-entropy loss alone; used by gradient checks.
pub fn loss(
    params: &ModelParameters,
    matrix: &FeatureMatrix,
    emb: Option<&ImageEmbedding>,
    label: usize,
) -> Result<f64, NetworkError> {
    let trace = run_forward(params, matrix, emb)?;
    Ok(cross_entropy(&trace.logits, label))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    StepDecay {
        every: usize,
        gamma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let LrSchedule::StepDecay { every, gamma } = self.schedule {
            if every == 0 || !(gamma > 0.0 && gamma.is_finite()) {
                return bad("step decay needs every > 0 and a positive gamma");
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::StepDecay { every, gamma } => self.learning_rate * gamma.powi((epoch / every) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub matrix: FeatureMatrix,
    pub embedding: Option<ImageEmbedding>,
    pub label: usize,
}

/// Random access to training examples, so large sets can build their
/// matrices on demand.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;

    fn example(&self, index: usize) -> Cow<'_, TrainExample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for [TrainExample] {
    fn len(&self) -> usize {
        <[TrainExample]>::len(self)
    }

    fn example(&self, index: usize) -> Cow<'_, TrainExample> {
        Cow::Borrowed(&self[index])
    }
}

impl TrainingSet for Vec<TrainExample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn example(&self, index: usize) -> Cow<'_, TrainExample> {
        Cow::Borrowed(&self[index])
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Examples per parallel work unit. Fixed so the summation order, and hence
/// the result, does not depend on the number of threads.
const GRADIENT_CHUNK: usize = 4;

/// Inputs of the first layer that are nonzero in `matrix`, ascending. Only
/// these rows of the first weight block can receive gradient.
fn first_layer_inputs(arch: &Architecture, matrix: &FeatureMatrix) -> Vec<usize> {
    let width = matrix.width();
    let data = matrix.valid_data();
    match arch.variant {
        Variant::SetCnn => (0..width)
            .filter(|&c| data.chunks_exact(width).any(|row| row[c] != 0.0))
            .collect(),
        Variant::Mlp => (0..data.len()).filter(|&i| data[i] != 0.0).collect(),
    }
}

/// Reusable gradient buffers. Only the touched rows of the first weight
/// block are ever nonzero, so clearing them afterwards is cheap.
struct Scratch {
    chunks: Vec<(Vec<f64>, Vec<usize>)>,
    total: Vec<f64>,
    total_rows: Vec<usize>,
    first: LayerShape,
}

impl Scratch {
    fn new(params: &ModelParameters, batch_size: usize) -> Self {
        let n = batch_size.div_ceil(GRADIENT_CHUNK);
        Self {
            chunks: (0..n).map(|_| (vec![0.0; params.len()], Vec::new())).collect(),
            total: vec![0.0; params.len()],
            total_rows: Vec::new(),
            first: params.layers[0],
        }
    }

    fn dense_from(&self) -> usize {
        self.first.offset + self.first.fan_in * self.first.fan_out
    }

    fn row(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.first.offset + i * self.first.fan_out;
        s..s + self.first.fan_out
    }
}

fn clear_touched(grad: &mut [f64], rows: &mut Vec<usize>, first: &LayerShape) {
    let fo = first.fan_out;
    for &i in rows.iter() {
        let s = first.offset + i * fo;
        grad[s..s + fo].fill(0.0);
    }
    grad[first.offset + first.fan_in * fo..].fill(0.0);
    rows.clear();
}

/// Sums the gradients of `batch` into `scratch.total` and returns the summed
/// loss.
fn batch_gradient<T: TrainingSet + ?Sized>(
    params: &ModelParameters,
    data: &T,
    batch: &[usize],
    scratch: &mut Scratch,
) -> Result<f64, NetworkError> {
    let losses: Vec<Result<f64, NetworkError>> = batch
        .par_chunks(GRADIENT_CHUNK)
        .zip(scratch.chunks.par_iter_mut())
        .map(|(chunk, (grad, rows))| {
            let mut loss = 0.0;
            for &i in chunk {
                let ex = data.example(i);
                loss += accumulate_gradient(params, &ex.matrix, ex.embedding.as_ref(), ex.label, grad)?;
                rows.extend(first_layer_inputs(&params.arch, &ex.matrix));
            }
            rows.sort_unstable();
            rows.dedup();
            Ok(loss)
        })
        .collect();
    let used = losses.len();
    let mut loss = 0.0;
    for l in losses {
        loss += l?;
    }
    // Untouched first-layer rows hold exact zeros, so skipping them leaves
    // the sum unchanged.
    let dense_from = scratch.dense_from();
    for k in 0..used {
        let (g, rows) = &scratch.chunks[k];
        for &i in rows {
            let r = scratch.row(i);
            scratch.total[r.clone()]
                .iter_mut()
                .zip(&g[r])
                .for_each(|(t, v)| *t += v);
        }
        scratch.total[dense_from..]
            .iter_mut()
            .zip(&g[dense_from..])
            .for_each(|(t, v)| *t += v);
        scratch.total_rows.extend_from_slice(rows);
        let (g, rows) = &mut scratch.chunks[k];
        clear_touched(g, rows, &scratch.first);
    }
    scratch.total_rows.sort_unstable();
    scratch.total_rows.dedup();
    Ok(loss)
}

/// Mini-batch SGD with optional momentum on the mean cross-entropy.
///
/// Shuffling is driven by `config.seed`; the result is bit-identical for the
/// same inputs regardless of thread count.
pub fn train<T: TrainingSet + ?Sized>(
    mut params: ModelParameters,
    data: &T,
    config: &TrainConfig,
) -> Result<TrainOutcome, NetworkError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = vec![0.0; params.len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut scratch = Scratch::new(&params, config.batch_size.min(data.len()));

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.rate_at(epoch);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let loss = batch_gradient(&params, data, batch, &mut scratch)?;
            let grad = &scratch.total;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NetworkError::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            let values = params.values_mut();
            if config.momentum > 0.0 {
                for ((p, v), g) in values.iter_mut().zip(&mut velocity).zip(grad) {
                    *v = config.momentum * *v + g * scale;
                    *p -= lr * *v;
                }
            } else {
                for (p, g) in values.iter_mut().zip(grad) {
                    *p -= lr * (g * scale);
                }
            }
            clear_touched(&mut scratch.total, &mut scratch.total_rows, &scratch.first);
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Argmax predictions over a training set, in index order.
pub fn predict_all<T: TrainingSet + ?Sized>(params: &ModelParameters, data: &T) -> Result<Vec<usize>, NetworkError> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ex = data.example(i);
            forward(params, &ex.matrix, ex.embedding.as_ref()).map(|o| o.argmax())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> Architecture {
        Architecture {
            variant,
            input_width: 6,
            max_rows: 5,
            feature_widths: vec![4, 3],
            head_hidden: vec![5],
            embedding_dim: 0,
            num_classes: 4,
            pool: PoolMode::Masked,
        }
    }

    fn matrix(valid: usize, rows: usize, width: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..valid * width).map(|_| rng.random::<f64>()).collect();
        FeatureMatrix::from_valid_rows(rows, width, 0, values).unwrap()
    }

    #[test]
    fn default_shapes() {
        let a = Architecture::set_cnn();
        let widths: Vec<(usize, usize)> = a.layer_shapes().iter().map(|l| (l.fan_in, l.fan_out)).collect();
        assert_eq!(
            widths,
            vec![
                (357, 256),
                (256, 512),
                (512, 1024),
                (1024, 2048),
                (2048, 1024),
                (1024, 81)
            ]
        );
        let m = Architecture::mlp();
        assert_eq!(m.layer_shapes()[0].fan_in, 99 * 357);
        assert_eq!(m.feature_widths, vec![2048, 2048, 2048]);
        assert_eq!(m.layer_shapes().len(), 4);
        let mut e = Architecture::set_cnn();
        e.embedding_dim = 16;
        assert_eq!(e.layer_shapes()[4].fan_in, 2048 + 32);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParameters::init(small(Variant::SetCnn), 9).unwrap();
        let b = ModelParameters::init(small(Variant::SetCnn), 9).unwrap();
        assert!(a.bit_eq(&b));
        for l in a.layers() {
            let bound = (3.0 / l.fan_in as f64).sqrt();
            assert!(l.weights(a.values()).iter().all(|w| w.abs() <= bound));
            assert!(l.bias(a.values()).iter().all(|&b| b == 0.0));
        }
        let c = ModelParameters::init(small(Variant::SetCnn), 10).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn softmax_is_normalized() {
        let p = ModelParameters::init(small(Variant::SetCnn), 1).unwrap();
        for valid in 0..=5 {
            let out = forward(&p, &matrix(valid, 5, 6, valid as u64), None).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(out.probs.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn empty_matrix_pools_to_zero() {
        let p = ModelParameters::init(small(Variant::SetCnn), 1).unwrap();
        let out = forward(&p, &matrix(0, 5, 6, 0), None).unwrap();
        // zero classifier input and zero biases give all-zero logits
        assert!(out.logits.iter().all(|&l| l == 0.0));
        let (g, loss) = backward(&p, &matrix(0, 5, 6, 0), None, 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let first = p.layers()[0];
        assert!(g[first.offset..first.offset + 28].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_loss_is_log_class_count() {
        let mut arch = Architecture::set_cnn();
        arch.feature_widths = vec![8, 8, 8, 8];
        arch.head_hidden = vec![8];
        let p = ModelParameters::init(arch, 0).unwrap();
        let m = FeatureMatrix::from_valid_rows(99, 357, 0, vec![]).unwrap();
        let l = loss(&p, &m, None, 5).unwrap();
        assert!((l - 81f64.ln()).abs() < 1e-12);
        assert!((l - 4.394).abs() < 1e-3);
    }

    #[test]
    fn padding_does_not_change_masked_logits() {
        let p = ModelParameters::init(small(Variant::SetCnn), 3).unwrap();
        let m = matrix(3, 5, 6, 4);
        let a = forward(&p, &m, None).unwrap();
        let b = forward(&p, &m.with_rows(50).unwrap(), None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn literal_pooling_sees_padding() {
        let mut arch = small(Variant::SetCnn);
        arch.pool = PoolMode::Literal;
        let mut p = ModelParameters::init(arch, 3).unwrap();
        // positive first-layer bias makes the zero row's activations nonzero
        let l0 = p.layers()[0];
        let start = l0.offset + l0.fan_in * l0.fan_out;
        for v in &mut p.values_mut()[start..start + l0.fan_out] {
            *v = 5.0;
        }
        let m = matrix(2, 5, 6, 4);
        let padded = forward(&p, &m, None).unwrap();
        let full = forward(&p, &m.with_rows(2).unwrap(), None).unwrap();
        assert_ne!(padded.logits, full.logits);
    }

    #[test]
    fn shape_errors() {
        let p = ModelParameters::init(small(Variant::Mlp), 3).unwrap();
        assert!(matches!(
            forward(&p, &matrix(2, 4, 6, 0), None),
            Err(NetworkError::Shape(_))
        ));
        assert!(matches!(
            forward(&p, &matrix(2, 5, 7, 0), None),
            Err(NetworkError::Shape(_))
        ));
        let e = ImageEmbedding {
            global_vec: vec![0.0],
            target_vec: vec![0.0],
        };
        assert!(matches!(
            forward(&p, &matrix(2, 5, 6, 0), Some(&e)),
            Err(NetworkError::Shape(_))
        ));
        assert!(matches!(
            backward(&p, &matrix(2, 5, 6, 0), None, 4),
            Err(NetworkError::Label { label: 4, .. })
        ));
        assert!(ModelParameters::from_values(small(Variant::Mlp), vec![0.0; 3]).is_err());
        let huge = Architecture {
            feature_widths: vec![usize::MAX / 2, 4],
            ..small(Variant::SetCnn)
        };
        assert!(matches!(huge.validate(), Err(NetworkError::Shape(_))));
        for v in [Variant::SetCnn, Variant::Mlp] {
            let a = small(v);
            assert_eq!(a.checked_param_count(), Some(a.param_count()));
        }
    }

    #[test]
    fn zero_rate_step_is_identity() {
        let p = ModelParameters::init(small(Variant::SetCnn), 3).unwrap();
        let data = vec![TrainExample {
            matrix: matrix(3, 5, 6, 1),
            embedding: None,
            label: 1,
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 1,
            ..Default::default()
        };
        let out = train(p.clone(), &data, &cfg).unwrap();
        assert!(out.params.bit_eq(&p));
    }

    #[test]
    fn training_rejects_bad_input() {
        let p = ModelParameters::init(small(Variant::SetCnn), 3).unwrap();
        let empty: Vec<TrainExample> = vec![];
        assert_eq!(
            train(p.clone(), &empty, &TrainConfig::default()).unwrap_err(),
            NetworkError::EmptyDataset
        );
        let data = vec![TrainExample {
            matrix: matrix(3, 5, 6, 1),
            embedding: None,
            label: 1,
        }];
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(p.clone(), &data, &cfg), Err(NetworkError::Config(_))));
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..Default::default()
        };
        assert!(matches!(train(p, &data, &cfg), Err(NetworkError::NonFiniteLoss { .. })));
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            schedule: LrSchedule::StepDecay { every: 2, gamma: 0.5 },
            ..Default::default()
        };
        let rates: Vec<f64> = (0..5).map(|e| cfg.rate_at(e)).collect();
        assert_eq!(rates, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    fn examples(n: usize, seed: u64) -> Vec<TrainExample> {
        (0..n)
            .map(|i| TrainExample {
                matrix: matrix(1 + i % 5, 5, 6, seed + i as u64),
                embedding: None,
                label: i % 4,
            })
            .collect()
    }

    #[test]
    fn one_step_matches_summed_backward() {
        for variant in [Variant::SetCnn, Variant::Mlp] {
            let p = ModelParameters::init(small(variant), 8).unwrap();
            let data = examples(7, 40);
            let cfg = TrainConfig {
                learning_rate: 1.0,
                epochs: 1,
                batch_size: 7,
                ..Default::default()
            };
            let stepped = train(p.clone(), &data, &cfg).unwrap().params;
            let mut sum = vec![0.0; p.len()];
            for ex in &data {
                let (g, _) = backward(&p, &ex.matrix, None, ex.label).unwrap();
                sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            }
            for ((new, old), g) in stepped.values().iter().zip(p.values()).zip(&sum) {
                assert!((new - (old - g / 7.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_ignores_thread_count() {
        for variant in [Variant::SetCnn, Variant::Mlp] {
            let p = ModelParameters::init(small(variant), 2).unwrap();
            let data = examples(23, 7);
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 10,
                momentum: 0.9,
                ..Default::default()
            };
            let run = |threads: usize| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| train(p.clone(), &data, &cfg).unwrap())
            };
            let (a, b) = (run(1), run(3));
            assert!(a.params.bit_eq(&b.params));
            assert_eq!(a.epoch_losses, b.epoch_losses);
        }
    }
}
