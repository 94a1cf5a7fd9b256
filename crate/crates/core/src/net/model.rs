use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerKind, ParamGrad};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feedforward network split into a feature extractor (layers `0..=split_index`)
/// and a head (the remaining layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    split_index: usize,
    /// Layers with index `<= frozen_upto` receive no parameter updates.
    frozen_upto: Option<usize>,
    num_classes: usize,
    seed: u64,
    #[serde(skip)]
    shapes: Vec<Vec<usize>>,
}

/// Cached intermediates of a forward pass starting at layer `start`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    start: usize,
    /// `acts[j]` is the input of layer `start + j`; the last entry is the output.
    acts: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardPass {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("a pass always holds its output")
    }

    /// Input of layer `index` (or the network output when `index` equals
    /// the layer count).
    pub fn input_of(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(self.start).and_then(|j| self.acts.get(j))
    }

    fn argmax_of(&self, index: usize) -> Option<&[usize]> {
        self.argmax[index - self.start].as_deref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradientRecord {
    /// One entry per layer; `None` for parameter-free or frozen layers.
    pub parameter_grads: Vec<Option<ParamGrad>>,
    /// Gradient with respect to the (pooled) split-layer activations.
    pub latent_grad: Option<Tensor>,
    pub input_grad: Option<Tensor>,
}

impl GradientRecord {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            parameter_grads: vec![None; num_layers],
            latent_grad: None,
            input_grad: None,
        }
    }

    /// `self += scale * other` over parameter gradients.
    pub fn add_param_grads(&mut self, other: &[Option<ParamGrad>], scale: f64) {
        for (mine, theirs) in self.parameter_grads.iter_mut().zip(other) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_scaled(t, scale),
                (None, Some(t)) => {
                    let mut g = ParamGrad {
                        weight: Tensor::zeros(t.weight.shape().to_vec()),
                        bias: Tensor::zeros(t.bias.shape().to_vec()),
                    };
                    g.add_scaled(t, scale);
                    *mine = Some(g);
                }
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.parameter_grads.iter_mut().flatten() {
            g.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.parameter_grads
            .iter()
            .flatten()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Split-layer activations reduced to one value per channel.
#[derive(Debug, Clone)]
pub struct PooledLatent {
    /// `(batch, m)`
    pub values: Tensor,
    /// Per sample and channel, the offset of the selected position within the
    /// split-layer output. Identity offsets for dense split layers.
    pub positions: Vec<usize>,
}

impl LayeredModel {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        split_index: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self {
            input_shape,
            layers,
            split_index,
            frozen_upto: None,
            num_classes: 0,
            seed,
            shapes: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Initializes every parameterized layer from `seed`.
    pub fn init(
        input_shape: Vec<usize>,
        kinds: &[LayerKind],
        split_index: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = kinds.iter().map(|&k| Layer::init(k, &mut rng)).collect();
        Self::new(input_shape, layers, split_index, seed)
    }

    /// Recomputes cached shape information and checks structural invariants.
    /// Called after deserialization.
    pub fn validate(&mut self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        if self.split_index >= self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "split index {} outside 0..{}",
                self.split_index,
                self.layers.len()
            )));
        }
        if let Some(f) = self.frozen_upto {
            if f >= self.layers.len() {
                return Err(Error::InvalidParameter(format!(
                    "frozen_upto {f} outside 0..{}",
                    self.layers.len()
                )));
            }
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            match (&layer.params, layer.kind.param_shapes()) {
                (Some(p), Some((ws, bs))) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::Shape(format!("layer {i} parameter shapes")));
                    }
                    p.weight.ensure_finite("layer weight")?;
                    p.bias.ensure_finite("layer bias")?;
                }
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "layer {i} ({}) parameter presence mismatch",
                        layer.kind.name()
                    )))
                }
            }
            let next = layer
                .kind
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "network output must be a vector of logits, got {out:?}"
            )));
        }
        let latent = &shapes[self.split_index + 1];
        if latent.len() != 1 && latent.len() != 3 {
            return Err(Error::Shape(format!(
                "split layer output must have rank 1 or 3 per sample, got {latent:?}"
            )));
        }
        self.num_classes = out[0];
        self.shapes = shapes;
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn frozen_upto(&self) -> Option<usize> {
        self.frozen_upto
    }

    pub fn set_frozen_upto(&mut self, frozen_upto: Option<usize>) -> Result<()> {
        if let Some(f) = frozen_upto {
            if f >= self.layers.len() {
                return Err(Error::InvalidParameter(format!(
                    "frozen_upto {f} outside 0..{}",
                    self.layers.len()
                )));
            }
        }
        self.frozen_upto = frozen_upto;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-sample input shape of layer `i` (`i == num_layers` gives the
    /// output shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Width `m` of the pooled latent representation.
    pub fn latent_dim(&self) -> usize {
        self.shapes[self.split_index + 1][0]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.layers[i].params.is_some() && self.frozen_upto.map_or(true, |f| i > f)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_pass(batch)?.acts.pop().unwrap())
    }

    pub fn forward_pass(&self, batch: &Tensor) -> Result<ForwardPass> {
        self.forward_from(0, batch.clone())
    }

    /// Runs layers `start..` on `input`, which must have the input shape of
    /// layer `start`.
    pub fn forward_from(&self, start: usize, input: Tensor) -> Result<ForwardPass> {
        self.run_layers(start, self.layers.len(), input)
    }

    /// Runs layers `start..end` and caches the intermediates.
    pub fn run_layers(&self, start: usize, end: usize, input: Tensor) -> Result<ForwardPass> {
        if start > end || end > self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "layer range {start}..{end} outside 0..{}",
                self.layers.len()
            )));
        }
        if input.shape().is_empty() || input.sample_shape() != self.shapes[start].as_slice() {
            return Err(Error::Shape(format!(
                "layer {start} expects per-sample shape {:?}, got {:?}",
                self.shapes[start],
                input.shape()
            )));
        }
        input.ensure_finite("network input")?;
        let mut acts = Vec::with_capacity(end - start + 1);
        let mut argmax = Vec::with_capacity(end - start);
        acts.push(input);
        for i in start..end {
            let (out, am) =
                self.layers[i].forward(acts.last().unwrap(), &self.shapes[i + 1], true);
            if !out.is_finite() {
                return Err(Error::NonFinite(format!(
                    "output of layer {i} ({})",
                    self.layers[i].kind.name()
                )));
            }
            acts.push(out);
            argmax.push(am);
        }
        Ok(ForwardPass { start, acts, argmax })
    }

    /// Activations `a(x)` at the split layer; convolutional maps are reduced
    /// by a per-channel spatial maximum.
    pub fn extract_activations(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.run_layers(0, self.split_index + 1, batch.clone())?;
        Ok(self.pool_latent(pass.output())?.values)
    }

    /// Pools a split-layer output of shape `(batch, m)` or `(batch, m, h, w)`.
    pub fn pool_latent(&self, split_output: &Tensor) -> Result<PooledLatent> {
        pool_channels(split_output)
    }

    /// Latent activations from a cached full forward pass.
    pub fn latent_from_pass(&self, pass: &ForwardPass) -> Result<PooledLatent> {
        let t = pass
            .input_of(self.split_index + 1)
            .ok_or_else(|| Error::MissingForwardCache("split layer not in pass".into()))?;
        pool_channels(t)
    }

    /// Reverse sweep seeded with `output_weights` (shape `(batch, k)`), i.e.
    /// gradients of `sum_n output_weights[n] . logits[n]`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        output_weights: &Tensor,
        want_latent: bool,
        want_input: bool,
    ) -> Result<GradientRecord> {
        self.sweep(pass, output_weights, want_latent, want_input, true)
    }

    /// Like [`backward`](Self::backward) but computes no parameter gradients.
    pub fn backward_latent_only(
        &self,
        pass: &ForwardPass,
        output_weights: &Tensor,
        want_input: bool,
    ) -> Result<GradientRecord> {
        self.sweep(pass, output_weights, true, want_input, false)
    }

    fn sweep(
        &self,
        pass: &ForwardPass,
        output_weights: &Tensor,
        want_latent: bool,
        want_input: bool,
        want_params: bool,
    ) -> Result<GradientRecord> {
        let n = self.layers.len();
        if pass.acts.len() != n - pass.start + 1 {
            return Err(Error::MissingForwardCache(
                "pass does not reach the network output".into(),
            ));
        }
        let out = pass.output();
        if output_weights.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "output weights {:?} do not match logits {:?}",
                output_weights.shape(),
                out.shape()
            )));
        }
        let split_in = self.split_index + 1;
        if want_latent && split_in < pass.start {
            return Err(Error::MissingForwardCache(
                "pass starts above the split layer".into(),
            ));
        }
        if want_input && pass.start != 0 {
            return Err(Error::MissingForwardCache(
                "pass does not start at the network input".into(),
            ));
        }

        let mut lowest = n + 1;
        if want_input {
            lowest = 0;
        }
        if want_latent {
            lowest = lowest.min(split_in);
        }
        if want_params {
            if let Some(j) = (pass.start..n).find(|&j| self.is_trainable(j)) {
                lowest = lowest.min(j + 1);
            }
        }

        let mut record = GradientRecord::empty(n);
        let mut delta = output_weights.clone();
        if want_latent && split_in == n {
            record.latent_grad = Some(gather_pooled(&delta, pass.output())?);
        }
        for i in (pass.start..n).rev() {
            let input = pass.input_of(i).unwrap();
            if want_params && self.is_trainable(i) {
                let g = self.layers[i].param_grad(input, &delta, true);
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of layer {i}")));
                }
                record.parameter_grads[i] = Some(g);
            }
            if i < lowest {
                break;
            }
            delta = self.layers[i].pull_adjoint(input, pass.argmax_of(i), &delta);
            delta.ensure_finite("backward adjoint")?;
            if want_latent && i == split_in {
                let split_out = pass.input_of(split_in).unwrap();
                record.latent_grad = Some(gather_pooled(&delta, split_out)?);
            }
            if want_input && i == 0 {
                record.input_grad = Some(delta.clone());
            }
        }
        Ok(record)
    }

    /// Pushes a tangent placed at the input of layer `from` through the rest of
    /// the network, returning tangents at the input of each layer from `from`
    /// onward (the last entry is the tangent of the logits).
    pub fn tangent_forward(
        &self,
        pass: &ForwardPass,
        from: usize,
        tangent: Tensor,
    ) -> Result<Vec<Tensor>> {
        let n = self.layers.len();
        if from < pass.start || from > n {
            return Err(Error::MissingForwardCache(format!(
                "tangent start {from} outside cached range {}..={n}",
                pass.start
            )));
        }
        let expected = pass.input_of(from).unwrap().shape();
        if tangent.shape() != expected {
            return Err(Error::Shape(format!(
                "tangent {:?} does not match activations {expected:?}",
                tangent.shape()
            )));
        }
        let mut tangents = Vec::with_capacity(n - from + 1);
        tangents.push(tangent);
        for i in from..n {
            let t = self.layers[i].push_tangent(
                pass.input_of(i).unwrap(),
                pass.argmax_of(i),
                tangents.last().unwrap(),
                &self.shapes[i + 1],
            );
            tangents.push(t);
        }
        Ok(tangents)
    }

    /// Parameter gradient of `sum_n output_weights[n] . (J_n t_n)`, the
    /// weighted logit tangent, where `tangents` come from
    /// [`tangent_forward`](Self::tangent_forward) started at layer `from`.
    /// Every layer is piecewise linear in its input, so the tangent is
    /// linear in each weight tensor and bias terms drop out.
    pub fn tangent_param_grads(
        &self,
        pass: &ForwardPass,
        from: usize,
        tangents: &[Tensor],
        output_weights: &Tensor,
    ) -> Result<Vec<Option<ParamGrad>>> {
        let n = self.layers.len();
        if tangents.len() != n - from + 1 {
            return Err(Error::Shape("tangent list does not match layer range".into()));
        }
        let mut grads = vec![None; n];
        let lowest = match (from..n).find(|&j| self.is_trainable(j)) {
            Some(j) => j,
            None => return Ok(grads),
        };
        let mut delta = output_weights.clone();
        for i in (lowest..n).rev() {
            if self.is_trainable(i) {
                let g = self.layers[i].param_grad(&tangents[i - from], &delta, false);
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("tangent gradient of layer {i}")));
                }
                grads[i] = Some(g);
            }
            if i == lowest {
                break;
            }
            delta = self.layers[i].pull_adjoint(pass.input_of(i).unwrap(), pass.argmax_of(i), &delta);
        }
        Ok(grads)
    }

    /// Pulls an adjoint given at the input of layer `end` back to the input of
    /// the pass (`pass.start`). Ignores parameters.
    pub fn pull_back(&self, pass: &ForwardPass, end: usize, delta: Tensor) -> Result<Tensor> {
        if end < pass.start || end > pass.start + pass.acts.len() - 1 {
            return Err(Error::MissingForwardCache(format!(
                "adjoint at layer {end} outside the cached pass"
            )));
        }
        if Some(delta.shape()) != pass.input_of(end).map(|t| t.shape()) {
            return Err(Error::Shape("adjoint does not match cached activations".into()));
        }
        let mut delta = delta;
        for i in (pass.start..end).rev() {
            delta = self.layers[i].pull_adjoint(pass.input_of(i).unwrap(), pass.argmax_of(i), &delta);
        }
        delta.ensure_finite("backward adjoint")?;
        Ok(delta)
    }

    /// Adjoint of [`broadcast_latent`](Self::broadcast_latent): sums each
    /// channel over spatial positions, giving `(batch, m)`.
    pub fn sum_channels(&self, t: &Tensor) -> Tensor {
        let batch = t.batch();
        let m = t.sample_shape()[0];
        let per = t.sample_len() / m;
        let mut out = Tensor::zeros(vec![batch, m]);
        for n in 0..batch {
            let src = t.sample(n);
            for (c, o) in out.sample_mut(n).iter_mut().enumerate() {
                *o = src[c * per..(c + 1) * per].iter().sum();
            }
        }
        out
    }

    /// Places a pooled latent direction `(batch, m)` at the positions selected
    /// by pooling, giving a tangent with the split-layer output shape.
    pub fn latent_tangent(&self, pooled: &PooledLatent, split_output: &Tensor, dir: &Tensor) -> Result<Tensor> {
        scatter_pooled(dir, &pooled.positions, split_output.shape())
    }

    /// Adds a pooled latent offset `(batch, m)` to every spatial position of
    /// the corresponding channel of a split-layer output.
    pub fn broadcast_latent(&self, split_output: &Tensor, offset: &Tensor) -> Result<Tensor> {
        broadcast_channels(split_output, offset)
    }

    /// Plain SGD on trainable layers: `w <- w - lr * g`.
    pub fn sgd_step(&mut self, grads: &GradientRecord, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be a non-negative finite number, got {learning_rate}"
            )));
        }
        if grads.parameter_grads.len() != self.layers.len() {
            return Err(Error::Shape("gradient record does not match model".into()));
        }
        let mut updated = Vec::new();
        for (i, g) in grads.parameter_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.is_trainable(i) {
                continue;
            }
            let p = self.layers[i].params.as_ref().unwrap();
            if g.weight.shape() != p.weight.shape() || g.bias.shape() != p.bias.shape() {
                return Err(Error::Shape(format!("gradient shape for layer {i}")));
            }
            let step = |w: &Tensor, d: &Tensor| -> Result<Tensor> {
                let data: Vec<f64> = w
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(w, d)| w - learning_rate * d)
                    .collect();
                crate::error::ensure_finite(&data, "parameter update")?;
                Tensor::new(w.shape().to_vec(), data)
            };
            updated.push((i, step(&p.weight, &g.weight)?, step(&p.bias, &g.bias)?));
        }
        for (i, w, b) in updated {
            let p = self.layers[i].params.as_mut().unwrap();
            p.weight = w;
            p.bias = b;
        }
        Ok(())
    }
}

fn pool_channels(t: &Tensor) -> Result<PooledLatent> {
    let batch = t.batch();
    match *t.sample_shape() {
        [m] => Ok(PooledLatent {
            values: t.clone(),
            positions: (0..batch).flat_map(|_| 0..m).collect(),
        }),
        [m, h, w] => {
            let hw = h * w;
            let mut values = Tensor::zeros(vec![batch, m]);
            let mut positions = Vec::with_capacity(batch * m);
            for n in 0..batch {
                let x = t.sample(n);
                let v = values.sample_mut(n);
                for c in 0..m {
                    let ch = &x[c * hw..(c + 1) * hw];
                    let mut best = 0;
                    for (j, &val) in ch.iter().enumerate() {
                        if val > ch[best] {
                            best = j;
                        }
                    }
                    v[c] = ch[best];
                    positions.push(c * hw + best);
                }
            }
            Ok(PooledLatent { values, positions })
        }
        ref s => Err(Error::Shape(format!(
            "split layer output must have rank 1 or 3 per sample, got {s:?}"
        ))),
    }
}

fn gather_pooled(delta: &Tensor, split_output: &Tensor) -> Result<Tensor> {
    let pooled = pool_channels(split_output)?;
    let m = pooled.values.sample_len();
    let mut out = Tensor::zeros(vec![delta.batch(), m]);
    for n in 0..delta.batch() {
        let d = delta.sample(n);
        let o = out.sample_mut(n);
        for c in 0..m {
            o[c] = d[pooled.positions[n * m + c]];
        }
    }
    Ok(out)
}

fn scatter_pooled(dir: &Tensor, positions: &[usize], shape: &[usize]) -> Result<Tensor> {
    let m = dir.sample_len();
    if dir.batch() != shape[0] || positions.len() != dir.batch() * m {
        return Err(Error::Shape(format!(
            "latent direction {:?} does not match split output {shape:?}",
            dir.shape()
        )));
    }
    let mut out = Tensor::zeros(shape.to_vec());
    for n in 0..dir.batch() {
        let d = dir.sample(n);
        let o = out.sample_mut(n);
        for c in 0..m {
            o[positions[n * m + c]] += d[c];
        }
    }
    Ok(out)
}

fn broadcast_channels(t: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let m = offset.sample_len();
    if t.batch() != offset.batch() || t.sample_shape().first() != Some(&m) {
        return Err(Error::Shape(format!(
            "offset {:?} does not match split output {:?}",
            offset.shape(),
            t.shape()
        )));
    }
    let per_channel = t.sample_len() / m;
    let mut out = t.clone();
    for n in 0..t.batch() {
        let o = offset.sample(n).to_vec();
        let x = out.sample_mut(n);
        for c in 0..m {
            for v in &mut x[c * per_channel..(c + 1) * per_channel] {
                *v += o[c];
            }
        }
    }
    Ok(out)
}
