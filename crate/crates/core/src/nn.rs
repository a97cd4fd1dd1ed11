//! Parameter storage and the layers the encoders, flows and generators are
//! assembled from.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var, NO_INDEX};
use crate::error::{CouplingError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static STORE_KEYS: AtomicUsize = AtomicUsize::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<F> {
    key: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> Clone for ParamStore<F> {
    /// A clone is a distinct store: tapes route gradients to it separately.
    fn clone(&self) -> Self {
        ParamStore {
            key: STORE_KEYS.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            key: STORE_KEYS.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn key(&self) -> usize {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrite a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = *self
            .index
            .get(name)
            .ok_or_else(|| CouplingError::Shape(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(CouplingError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copy every value from `other` (same layout).
    pub fn copy_from(&mut self, other: &ParamStore<F>) {
        assert_eq!(self.names, other.names, "copy_from: layout mismatch");
        self.tensors.clone_from(&other.tensors);
    }

    /// SHA-256 over names, shapes and values (as f64 little-endian).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'t, F: Scalar>(self, x: Var<'t, F>) -> Var<'t, F> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

fn uniform<F: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(rows, cols, |_, _| F::of(rng.random_range(-bound..=bound)))
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(fan_in, fan_out, bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(1, fan_out, bound, rng));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, ps: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        x.matmul(tape.param(ps, self.weight))
            .add_row(tape.param(ps, self.bias))
    }
}

/// Stack of [`Linear`] layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last` the final layer starts at
    /// zero so the network initially outputs zeros.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, ps: &ParamStore<F>, mut x: Var<'t, F>) -> Var<'t, F> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, ps, x);
            if i < last {
                x = self.activation.apply(x);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Lookup table: index `i` selects row `i`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(count, dim, F::of(0.5), rng));
        Embedding { table, count, dim }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, ps: &ParamStore<F>, idx: &[usize]) -> Var<'t, F> {
        debug_assert!(idx.iter().all(|&i| i < self.count));
        tape.param(ps, self.table).select_rows(idx)
    }
}

/// Row standardization followed by a learned per-column gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, F::one())),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, ps: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        x.layer_norm(F::of(1e-5))
            .mul_row(tape.param(ps, self.gain))
            .add_row(tape.param(ps, self.offset))
    }
}

/// Pre-norm bidirectional transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff: Mlp,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must be divisible by heads");
        TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                &[width, 2 * width, width],
                Activation::Silu,
                false,
                rng,
            ),
            heads,
        }
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        x: Var<'t, F>,
        batch: usize,
        seq: usize,
    ) -> Var<'t, F> {
        let h = self.ln_attn.forward(tape, ps, x);
        let q = self.query.forward(tape, ps, h);
        let k = self.key.forward(tape, ps, h);
        let v = self.value.forward(tape, ps, h);
        let a = Var::attention(q, k, v, batch, seq, self.heads);
        let x = x + self.out.forward(tape, ps, a);
        let h = self.ln_ff.forward(tape, ps, x);
        x + self.ff.forward(tape, ps, h)
    }
}

/// Learned positional table plus a stack of [`TransformerBlock`]s and a final norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    positions: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    pub seq: usize,
    pub width: usize,
}

impl Transformer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        seq: usize,
        width: usize,
        depth: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let positions = store.add(
            format!("{name}.positions"),
            Tensor::randn(seq, width, F::of(0.1), rng),
        );
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), width, heads, rng))
            .collect();
        Transformer {
            positions,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), width),
            seq,
            width,
        }
    }

    /// `x: (batch * seq) x width` token features, positions added here.
    pub fn forward<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        x: Var<'t, F>,
        batch: usize,
    ) -> Var<'t, F> {
        let pos_idx: Vec<usize> = (0..batch * self.seq).map(|r| r % self.seq).collect();
        let mut h = x + tape.param(ps, self.positions).select_rows(&pos_idx);
        for block in &self.blocks {
            h = block.forward(tape, ps, h, batch, self.seq);
        }
        self.final_norm.forward(tape, ps, h)
    }
}

/// Index map for a `k x k` convolution over a `batch x h x w x channels` grid stored
/// as `(batch * h * w) x channels`. Row `(b, oy, ox)` and column `(ky, kx, c)` map to
/// the flat input element, or [`NO_INDEX`] in the zero padding.
pub fn conv_index_map(
    batch: usize,
    h: usize,
    w: usize,
    channels: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut map = Vec::with_capacity(batch * ho * wo * k * k * channels);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..channels {
                            map.push(if inside {
                                ((b * h + iy as usize) * w + ix as usize) * channels + c
                            } else {
                                NO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    (map, ho, wo)
}

/// Strided 2-D convolution via an im2col gather.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: store.add(format!("{name}.weight"), uniform(fan_in, out_channels, bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(1, out_channels, bound, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Returns the output and its spatial size.
    pub fn forward<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        x: Var<'t, F>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> (Var<'t, F>, usize, usize) {
        let (map, ho, wo) = conv_index_map(batch, h, w, self.in_channels, self.kernel, self.stride, self.pad);
        let cols = x.gather(map, batch * ho * wo, self.kernel * self.kernel * self.in_channels);
        let y = cols
            .matmul(tape.param(ps, self.weight))
            .add_row(tape.param(ps, self.bias));
        (y, ho, wo)
    }
}

/// Transposed convolution: the adjoint of [`Conv2d`]'s gather, realised as a
/// scatter-add of per-pixel kernel contributions.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: ParamId,
    bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel / (stride * stride)).max(1) as f64).sqrt();
        ConvTranspose2d {
            weight: store.add(
                format!("{name}.weight"),
                uniform(in_channels, kernel * kernel * out_channels, bound, rng),
            ),
            bias: store.add(format!("{name}.bias"), uniform(1, out_channels, bound, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        x: Var<'t, F>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> (Var<'t, F>, usize, usize) {
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let (map, hi, wi) = conv_index_map(batch, ho, wo, self.out_channels, self.kernel, self.stride, self.pad);
        debug_assert_eq!((hi, wi), (h, w));
        let contrib = x.matmul(tape.param(ps, self.weight));
        let y = contrib
            .scatter_add(map, batch * ho * wo, self.out_channels)
            .add_row(tape.param(ps, self.bias));
        (y, ho, wo)
    }
}
