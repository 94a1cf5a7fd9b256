use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer kind together with its kind-specific sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Weight and bias shapes for parameterized kinds.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::Shape(format!(
                        "dense layer expects [{in_features}], got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [c, h, w] = rank3(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                if stride == 0 || kernel == 0 || kernel > h || kernel > w {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {kernel} / stride {stride} invalid for {h}x{w} input"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } => {
                let [c, h, w] = rank3(input, "maxpool2d")?;
                if stride == 0 || kernel == 0 || kernel > h || kernel > w {
                    return Err(Error::Shape(format!(
                        "maxpool2d kernel {kernel} / stride {stride} invalid for {h}x{w} input"
                    )));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn rank3(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!(
            "{what} expects a (channels, height, width) input, got {shape:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamGrad {
    pub fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self.weight.data_mut().iter_mut().zip(other.weight.data()) {
            *a += scale * b;
        }
        for (a, b) in self.bias.data_mut().iter_mut().zip(other.bias.data()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Option<Params>,
}

impl Layer {
    /// Parameter-free layer, or a parameterized one initialized uniformly
    /// in `[-s, s]` with `s = sqrt(1 / fan_in)`.
    pub fn init(kind: LayerKind, rng: &mut impl Rng) -> Self {
        let params = kind.param_shapes().map(|(ws, bs)| {
            let fan_in: usize = ws[1..].iter().product();
            let s = (1.0 / fan_in as f64).sqrt();
            let mut draw = |shape: Vec<usize>| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
                Tensor::new(shape, data).expect("shape and data agree")
            };
            let weight = draw(ws);
            let bias = draw(bs);
            Params { weight, bias }
        });
        Self { kind, params }
    }

    pub fn with_params(kind: LayerKind, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (ws, bs) = kind.param_shapes().ok_or_else(|| {
            Error::InvalidParameter(format!("{} layers carry no parameters", kind.name()))
        })?;
        if weight.shape() != ws.as_slice() || bias.shape() != bs.as_slice() {
            return Err(Error::Shape(format!(
                "{} parameters must be {ws:?} / {bs:?}, got {:?} / {:?}",
                kind.name(),
                weight.shape(),
                bias.shape()
            )));
        }
        weight.ensure_finite("layer weight")?;
        bias.ensure_finite("layer bias")?;
        Ok(Self {
            kind,
            params: Some(Params { weight, bias }),
        })
    }

    pub fn parameterless(kind: LayerKind) -> Result<Self> {
        if kind.has_params() {
            return Err(Error::InvalidParameter(format!(
                "{} layers need parameters",
                kind.name()
            )));
        }
        Ok(Self { kind, params: None })
    }

    fn params(&self) -> &Params {
        self.params
            .as_ref()
            .expect("parameterized layer always carries parameters")
    }

    /// Forward over a batch. For max-pool layers the arg-max input offsets
    /// (within each sample) are returned alongside the output.
    pub(crate) fn forward(
        &self,
        input: &Tensor,
        out_shape: &[usize],
        with_bias: bool,
    ) -> (Tensor, Option<Vec<usize>>) {
        let batch = input.batch();
        let mut shape = vec![batch];
        shape.extend_from_slice(out_shape);
        let mut out = Tensor::zeros(shape);
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let p = self.params();
                let w = p.weight.data();
                let b = p.bias.data();
                for n in 0..batch {
                    let x = input.sample(n);
                    let y = out.sample_mut(n);
                    for o in 0..out_features {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        let mut acc = if with_bias { b[o] } else { 0.0 };
                        for (wi, xi) in row.iter().zip(x) {
                            acc += wi * xi;
                        }
                        y[o] = acc;
                    }
                }
                (out, None)
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let p = self.params();
                let w = p.weight.data();
                let b = p.bias.data();
                let (ih, iw) = (input.shape()[2], input.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                for n in 0..batch {
                    let x = input.sample(n);
                    let y = out.sample_mut(n);
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = if with_bias { b[oc] } else { 0.0 };
                                for ic in 0..in_channels {
                                    let wbase = (oc * in_channels + ic) * kernel * kernel;
                                    let xbase = ic * ih * iw;
                                    for ky in 0..kernel {
                                        let xrow = xbase + (oy * stride + ky) * iw + ox * stride;
                                        let wrow = wbase + ky * kernel;
                                        for kx in 0..kernel {
                                            acc += w[wrow + kx] * x[xrow + kx];
                                        }
                                    }
                                }
                                y[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                (out, None)
            }
            LayerKind::Relu => {
                for (y, &x) in out.data_mut().iter_mut().zip(input.data()) {
                    *y = if x > 0.0 { x } else { 0.0 };
                }
                (out, None)
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let (c, ih, iw) = (input.shape()[1], input.shape()[2], input.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let per_out = c * oh * ow;
                let mut argmax = vec![0usize; batch * per_out];
                for n in 0..batch {
                    let x = input.sample(n);
                    let y = out.sample_mut(n);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                // first maximum in row-major window order
                                let mut best = usize::MAX;
                                let mut best_v = f64::NEG_INFINITY;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let idx = (ch * ih + oy * stride + ky) * iw
                                            + ox * stride
                                            + kx;
                                        if best == usize::MAX || x[idx] > best_v {
                                            best = idx;
                                            best_v = x[idx];
                                        }
                                    }
                                }
                                let o = (ch * oh + oy) * ow + ox;
                                y[o] = best_v;
                                argmax[n * per_out + o] = best;
                            }
                        }
                    }
                }
                (out, Some(argmax))
            }
            LayerKind::Flatten => {
                out.data_mut().copy_from_slice(input.data());
                (out, None)
            }
        }
    }

    /// Applies the layer's Jacobian at the cached point to a tangent batch.
    /// `input` is the primal input the layer saw during the forward pass.
    pub(crate) fn push_tangent(
        &self,
        input: &Tensor,
        argmax: Option<&[usize]>,
        tangent: &Tensor,
        out_shape: &[usize],
    ) -> Tensor {
        match self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                self.forward(tangent, out_shape, false).0
            }
            LayerKind::Relu => {
                let mut out = tangent.clone();
                for (t, &x) in out.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *t = 0.0;
                    }
                }
                out
            }
            LayerKind::MaxPool2d { .. } => {
                let argmax = argmax.expect("max-pool forward records arg-max");
                let batch = tangent.batch();
                let mut shape = vec![batch];
                shape.extend_from_slice(out_shape);
                let mut out = Tensor::zeros(shape);
                let per_out: usize = out_shape.iter().product();
                for n in 0..batch {
                    let t = tangent.sample(n);
                    let y = out.sample_mut(n);
                    for (o, yo) in y.iter_mut().enumerate() {
                        *yo = t[argmax[n * per_out + o]];
                    }
                }
                out
            }
            LayerKind::Flatten => {
                let mut shape = vec![tangent.batch()];
                shape.extend_from_slice(out_shape);
                tangent.clone().reshape(shape).expect("flatten preserves size")
            }
        }
    }

    /// Transposed Jacobian: maps the adjoint of the output to the adjoint of
    /// the input.
    pub(crate) fn pull_adjoint(
        &self,
        input: &Tensor,
        argmax: Option<&[usize]>,
        delta: &Tensor,
    ) -> Tensor {
        let batch = delta.batch();
        let mut din = Tensor::zeros(input.shape().to_vec());
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let w = self.params().weight.data();
                for n in 0..batch {
                    let d = delta.sample(n);
                    let g = din.sample_mut(n);
                    for o in 0..out_features {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        let dn = d[o];
                        for (gi, wi) in g.iter_mut().zip(row) {
                            *gi += dn * wi;
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let w = self.params().weight.data();
                let (ih, iw) = (input.shape()[2], input.shape()[3]);
                let (oh, ow) = (delta.shape()[2], delta.shape()[3]);
                for n in 0..batch {
                    let d = delta.sample(n);
                    let g = din.sample_mut(n);
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dv = d[(oc * oh + oy) * ow + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ic in 0..in_channels {
                                    let wbase = (oc * in_channels + ic) * kernel * kernel;
                                    let gbase = ic * ih * iw;
                                    for ky in 0..kernel {
                                        let grow = gbase + (oy * stride + ky) * iw + ox * stride;
                                        let wrow = wbase + ky * kernel;
                                        for kx in 0..kernel {
                                            g[grow + kx] += dv * w[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Relu => {
                for ((g, &d), &x) in din.data_mut().iter_mut().zip(delta.data()).zip(input.data())
                {
                    if x > 0.0 {
                        *g = d;
                    }
                }
            }
            LayerKind::MaxPool2d { .. } => {
                let argmax = argmax.expect("max-pool forward records arg-max");
                let per_out = delta.sample_len();
                for n in 0..batch {
                    let d = delta.sample(n);
                    let g = din.sample_mut(n);
                    for (o, &dv) in d.iter().enumerate() {
                        g[argmax[n * per_out + o]] += dv;
                    }
                }
            }
            LayerKind::Flatten => {
                din.data_mut().copy_from_slice(delta.data());
            }
        }
        din
    }

    /// Parameter gradient given the layer input (primal or tangent) and the
    /// adjoint of the output. Bias gradients are skipped (left zero) when
    /// `with_bias` is false.
    pub(crate) fn param_grad(&self, input: &Tensor, delta: &Tensor, with_bias: bool) -> ParamGrad {
        let p = self.params();
        let mut gw = Tensor::zeros(p.weight.shape().to_vec());
        let mut gb = Tensor::zeros(p.bias.shape().to_vec());
        let batch = delta.batch();
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let gwd = gw.data_mut();
                for n in 0..batch {
                    let x = input.sample(n);
                    let d = delta.sample(n);
                    for o in 0..out_features {
                        let dn = d[o];
                        if dn == 0.0 {
                            continue;
                        }
                        let row = &mut gwd[o * in_features..(o + 1) * in_features];
                        for (gi, xi) in row.iter_mut().zip(x) {
                            *gi += dn * xi;
                        }
                    }
                }
                if with_bias {
                    let gbd = gb.data_mut();
                    for n in 0..batch {
                        for (g, d) in gbd.iter_mut().zip(delta.sample(n)) {
                            *g += d;
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let (ih, iw) = (input.shape()[2], input.shape()[3]);
                let (oh, ow) = (delta.shape()[2], delta.shape()[3]);
                let gwd = gw.data_mut();
                for n in 0..batch {
                    let x = input.sample(n);
                    let d = delta.sample(n);
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dv = d[(oc * oh + oy) * ow + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ic in 0..in_channels {
                                    let wbase = (oc * in_channels + ic) * kernel * kernel;
                                    let xbase = ic * ih * iw;
                                    for ky in 0..kernel {
                                        let xrow = xbase + (oy * stride + ky) * iw + ox * stride;
                                        let wrow = wbase + ky * kernel;
                                        for kx in 0..kernel {
                                            gwd[wrow + kx] += dv * x[xrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if with_bias {
                    let gbd = gb.data_mut();
                    for n in 0..batch {
                        let d = delta.sample(n);
                        for (oc, g) in gbd.iter_mut().enumerate() {
                            *g += d[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                        }
                    }
                }
            }
            _ => unreachable!("param_grad on a parameter-free layer"),
        }
        ParamGrad {
            weight: gw,
            bias: gb,
        }
    }
}
