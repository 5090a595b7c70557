//! Minimal dense-network engine.
//!
//! Every trainable model in the simulator (local classifiers, actor, critic
//! and their targets) is a fully connected network evaluated through this
//! module. Parameters live in a single flat [`ParamVector`] so that model
//! exchange, staleness scaling, aggregation and soft target updates are all
//! plain element-wise algebra over equal layouts.
//!
//! All arithmetic is `f64`; every operation is a pure function of its inputs
//! (and an explicit seed where randomness is involved), so repeated calls
//! agree bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element-wise activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply_inplace(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output itself.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of one dense layer: `fan_in` inputs feeding `fan_out` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerDims {
    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

/// Architecture of a dense network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    /// Hidden layers as (width, activation) pairs, input side first.
    pub hidden: Vec<(usize, Activation)>,
    pub output: (usize, Activation),
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<(usize, Activation)>,
        output: (usize, Activation),
    ) -> Self {
        Self {
            input_dim,
            hidden,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("net input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&(w, _)| w == 0) || self.output.0 == 0 {
            return Err(Error::InvalidConfig("net widths must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out, activation) per layer, input side first.
    pub fn layers(&self) -> Vec<(LayerDims, Activation)> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &(width, act) in &self.hidden {
            out.push((LayerDims { fan_in, fan_out: width }, act));
            fan_in = width;
        }
        out.push((
            LayerDims { fan_in, fan_out: self.output.0 },
            self.output.1,
        ));
        out
    }

    pub fn layout(&self) -> Vec<LayerDims> {
        self.layers().into_iter().map(|(d, _)| d).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.output.0
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerDims::param_count).sum()
    }
}

/// Flat, ordered collection of all trainable scalars of one network.
///
/// Storage order is per layer: the `fan_in x fan_out` weight matrix
/// (row-major, rows indexed by input) followed by the `fan_out` biases.
/// The layout is fixed at construction; vectors with equal layouts are
/// element-wise combinable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerDims>,
}

fn expected_len(layout: &[LayerDims]) -> usize {
    layout.iter().map(LayerDims::param_count).sum()
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayerDims>) -> Self {
        let len = expected_len(&layout);
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn from_values(layout: Vec<LayerDims>, values: Vec<f64>) -> Result<Self> {
        let want = expected_len(&layout);
        if values.len() != want {
            return Err(Error::LayoutMismatch(format!(
                "layout expects {want} scalars, got {}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[LayerDims] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layout[..layer].iter().map(LayerDims::param_count).sum()
    }

    fn weight_view(&self, layer: usize) -> ArrayView2<'_, f64> {
        let dims = self.layout[layer];
        let off = self.layer_offset(layer);
        ArrayView2::from_shape(
            (dims.fan_in, dims.fan_out),
            &self.values[off..off + dims.fan_in * dims.fan_out],
        )
        .expect("layout offsets are internally consistent")
    }

    fn bias_slice(&self, layer: usize) -> &[f64] {
        let dims = self.layout[layer];
        let off = self.layer_offset(layer) + dims.fan_in * dims.fan_out;
        &self.values[off..off + dims.fan_out]
    }

    fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(
                "operands carry different layer layouts".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer activations cached by one forward pass, consumed by backward.
#[derive(Debug)]
pub struct ForwardTrace {
    input: Array2<f64>,
    /// Activated output of every layer, input side first.
    outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.input.nrows()
    }
}

/// Initializes parameters for `spec`: weights uniform in
/// `(-1/sqrt(fan_in), +1/sqrt(fan_in))`, biases zero. Deterministic per seed.
pub fn init_params(spec: &NetSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let layout = spec.layout();
    let mut params = ParamVector::zeros(layout.clone());
    let mut off = 0;
    for dims in &layout {
        let bound = 1.0 / (dims.fan_in as f64).sqrt();
        let n_w = dims.fan_in * dims.fan_out;
        for v in &mut params.values[off..off + n_w] {
            *v = rng.random_range(-bound..bound);
        }
        // biases stay zero
        off += dims.param_count();
    }
    params
}

/// Runs the network on a batch (samples in rows). Returns outputs and the
/// trace required by [`backward`].
pub fn forward(
    params: &ParamVector,
    spec: &NetSpec,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, ForwardTrace)> {
    if params.layout != spec.layout() {
        return Err(Error::LayoutMismatch(
            "params were built for a different spec".into(),
        ));
    }
    if x.ncols() != spec.input_dim {
        return Err(Error::DimMismatch(format!(
            "input width {} != net input_dim {}",
            x.ncols(),
            spec.input_dim
        )));
    }

    let layers = spec.layers();
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, (_, act)) in layers.iter().enumerate() {
        let input = if l == 0 { x } else { &outputs[l - 1] };
        let mut z = input.dot(&params.weight_view(l));
        let bias = Array1::from_iter(params.bias_slice(l).iter().copied());
        z += &bias;
        act.apply_inplace(&mut z);
        outputs.push(z);
    }
    let y = outputs.last().expect("at least one layer").clone();
    Ok((
        y,
        ForwardTrace {
            input: x.clone(),
            outputs,
        },
    ))
}

/// Backpropagates `upstream` (dL/d output, same shape as the batch output)
/// through the trace. Returns the parameter gradient (same layout as
/// `params`) and the gradient with respect to the network input, which the
/// actor update chains through the critic.
pub fn backward(
    params: &ParamVector,
    spec: &NetSpec,
    trace: ForwardTrace,
    upstream: &Array2<f64>,
) -> Result<(ParamVector, Array2<f64>)> {
    let layers = spec.layers();
    if params.layout != spec.layout() {
        return Err(Error::LayoutMismatch(
            "params were built for a different spec".into(),
        ));
    }
    if trace.outputs.len() != layers.len()
        || trace.input.ncols() != spec.input_dim
        || trace.outputs.last().map(Array2::dim) != Some(upstream.dim())
    {
        return Err(Error::DimMismatch(
            "trace does not match this spec/upstream; it must come from the matching forward"
                .into(),
        ));
    }

    let mut grad = ParamVector::zeros(params.layout.clone());
    let mut g = upstream.clone();
    for l in (0..layers.len()).rev() {
        let (dims, act) = layers[l];
        // dz = g * act'(output)
        let mut dz = g;
        dz.zip_mut_with(&trace.outputs[l], |gv, &av| {
            *gv *= act.derivative_from_output(av);
        });

        let input = if l == 0 { &trace.input } else { &trace.outputs[l - 1] };
        let dw = input.t().dot(&dz);
        let dw = dw.as_standard_layout();
        let db = dz.sum_axis(Axis(0));

        let off = grad.layer_offset(l);
        let n_w = dims.fan_in * dims.fan_out;
        grad.values[off..off + n_w].copy_from_slice(dw.as_slice().expect("standard layout"));
        grad.values[off + n_w..off + n_w + dims.fan_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));

        g = dz.dot(&params.weight_view(l).t());
    }
    Ok((grad, g))
}

/// One plain gradient-descent step: `params - eta * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    combine_params(params, grad, 1.0, -eta)
}

/// Softmax cross-entropy over a batch of logits.
///
/// Returns the loss summed over the batch and the gradient with respect to
/// the logits (softmax minus one-hot, unnormalized).
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != logits.nrows() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }

    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        row.mapv_inplace(|v| (v - lse).exp());
        row[label] -= 1.0;
    }
    Ok((loss, grad))
}

/// Exponential target tracking: `tau * online + (1 - tau) * target`.
pub fn soft_update_params(
    target: &ParamVector,
    online: &ParamVector,
    tau: f64,
) -> Result<ParamVector> {
    combine_params(target, online, 1.0 - tau, tau)
}

/// Element-wise scaling.
pub fn scale_params(params: &ParamVector, factor: f64) -> ParamVector {
    let mut out = params.clone();
    for v in &mut out.values {
        *v *= factor;
    }
    out
}

/// Element-wise linear combination `ca * a + cb * b` over equal layouts.
pub fn combine_params(a: &ParamVector, b: &ParamVector, ca: f64, cb: f64) -> Result<ParamVector> {
    a.check_same_layout(b)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    Ok(ParamVector {
        values,
        layout: a.layout.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    layout: Vec<LayerDims>,
    len: usize,
}

impl ParamVector {
    /// Writes a one-line JSON layout header followed by the values as a flat
    /// little-endian f64 array.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ParamHeader {
            layout: self.layout.clone(),
            len: self.values.len(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if r.read(&mut byte)? == 0 {
                return Err(Error::CheckpointFormat("missing header newline".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 20 {
                return Err(Error::CheckpointFormat("unterminated header".into()));
            }
        }
        let header: ParamHeader = serde_json::from_slice(&header_bytes)?;
        if header.len != expected_len(&header.layout) {
            return Err(Error::CheckpointFormat(
                "header length disagrees with layout".into(),
            ));
        }
        let mut raw = vec![0u8; header.len * 8];
        r.read_exact(&mut raw).map_err(|_| Error::IdxTruncated {
            need: header.len * 8,
            have: 0,
        })?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            values,
            layout: header.layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
