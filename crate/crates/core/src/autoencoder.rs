//! Reparameterized encoder, reconstruction head, and the reconstruction / KL terms
//! of the Stage A objective.
//!
//! The posterior over `u` is `N(mean(x), sigma^2 I)` with a fixed `sigma`, so the
//! KL to the standard normal depends only on the mean.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Arch, ExperimentConfig, NetConfig};
use crate::error::{CouplingError, Result};
use crate::nn::{Activation, Conv2d, ConvTranspose2d, Embedding, Linear, Mlp, ParamStore, Transformer};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Tensor;
use crate::types::{flatten_tokens, ContinuousRepresentation, LatentShape, LogitGrid, TokenSequence};

#[derive(Clone, Debug)]
pub struct EncoderOutput<F> {
    pub mean: Vec<F>,
    pub noise_std: F,
    pub noise: Vec<F>,
    pub sampled_u: ContinuousRepresentation<F>,
}

fn mlp_dims(input: usize, net: &NetConfig, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(net.width, net.depth));
    dims.push(output);
    dims
}

#[derive(Clone, Debug)]
enum EncoderNet {
    Mlp(Mlp),
    Transformer {
        embed: Embedding,
        body: Transformer,
        proj: Linear,
    },
    Conv {
        embed: Embedding,
        down1: Conv2d,
        down2: Conv2d,
        side: usize,
        act: Activation,
    },
}

#[derive(Clone, Debug)]
enum HeadNet {
    Mlp(Mlp),
    Transformer {
        proj: Linear,
        body: Transformer,
        out: Linear,
    },
    Conv {
        up1: ConvTranspose2d,
        up2: ConvTranspose2d,
        out: Linear,
        side: usize,
        act: Activation,
    },
}

/// Encoder `x -> mean` plus reconstruction head `u -> logits`, with parameters
/// stored under `encoder.*` and `recon_head.*`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    encoder: EncoderNet,
    head: HeadNet,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub shape: LatentShape,
    pub noise_std: f64,
}

impl Autoencoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &ExperimentConfig,
        rng: &mut R,
    ) -> Self {
        let t = cfg.data.seq_len;
        let v = cfg.data.vocab_size;
        let shape = LatentShape::new(cfg.model.latent_positions, cfg.model.latent_channels);
        let d = shape.dim();
        let net = &cfg.model.encoder;
        let act = cfg.model.activation;
        let (encoder, head) = match net.arch {
            Arch::Mlp => (
                EncoderNet::Mlp(Mlp::new(store, "encoder.mlp", &mlp_dims(t * v, net, d), act, false, rng)),
                HeadNet::Mlp(Mlp::new(store, "recon_head.mlp", &mlp_dims(d, net, t * v), act, false, rng)),
            ),
            Arch::Transformer => (
                EncoderNet::Transformer {
                    embed: Embedding::new(store, "encoder.embed", v, net.width, rng),
                    body: Transformer::new(store, "encoder.body", t, net.width, net.depth, net.heads, rng),
                    proj: Linear::new(store, "encoder.proj", t * net.width, d, rng),
                },
                HeadNet::Transformer {
                    proj: Linear::new(store, "recon_head.proj", d, t * net.width, rng),
                    body: Transformer::new(store, "recon_head.body", t, net.width, net.depth, net.heads, rng),
                    out: Linear::new(store, "recon_head.out", net.width, v, rng),
                },
            ),
            Arch::Conv => {
                let side = cfg.data.image_side.expect("validated: conv needs image data");
                let w = net.width;
                let c = shape.channels;
                (
                    EncoderNet::Conv {
                        embed: Embedding::new(store, "encoder.embed", v, w, rng),
                        down1: Conv2d::new(store, "encoder.down1", w, w, 4, 2, 1, rng),
                        down2: Conv2d::new(store, "encoder.down2", w, c, 4, 2, 1, rng),
                        side,
                        act,
                    },
                    HeadNet::Conv {
                        up1: ConvTranspose2d::new(store, "recon_head.up1", c, w, 4, 2, 1, rng),
                        up2: ConvTranspose2d::new(store, "recon_head.up2", w, w, 4, 2, 1, rng),
                        out: Linear::new(store, "recon_head.out", w, v, rng),
                        side,
                        act,
                    },
                )
            }
        };
        Autoencoder {
            encoder,
            head,
            seq_len: t,
            vocab_size: v,
            shape,
            noise_std: cfg.stage_a.latent_noise_std,
        }
    }

    /// Posterior means for a batch of flattened token indices: `batch x dim`.
    pub fn mean_var<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        tokens: &[usize],
        batch: usize,
    ) -> Var<'t, F> {
        let (t, v) = (self.seq_len, self.vocab_size);
        match &self.encoder {
            EncoderNet::Mlp(net) => {
                let x = tape.constant(Tensor::one_hot(tokens, v).reshaped(batch, t * v).expect("one-hot"));
                net.forward(tape, ps, x)
            }
            EncoderNet::Transformer { embed, body, proj } => {
                let h = body.forward(tape, ps, embed.forward(tape, ps, tokens), batch);
                proj.forward(tape, ps, h.reshape(batch, t * body.width))
            }
            EncoderNet::Conv {
                embed,
                down1,
                down2,
                side,
                act,
            } => {
                let h = embed.forward(tape, ps, tokens);
                let (h, s1, _) = down1.forward(tape, ps, h, batch, *side, *side);
                let (h, _, _) = down2.forward(tape, ps, act.apply(h), batch, s1, s1);
                h.reshape(batch, self.shape.dim())
            }
        }
    }

    /// Reconstruction logits, `(batch * seq_len) x vocab`.
    pub fn head_logits<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        u: Var<'t, F>,
        batch: usize,
    ) -> Var<'t, F> {
        let (t, v) = (self.seq_len, self.vocab_size);
        match &self.head {
            HeadNet::Mlp(net) => net.forward(tape, ps, u).reshape(batch * t, v),
            HeadNet::Transformer { proj, body, out } => {
                let h = proj.forward(tape, ps, u).reshape(batch * t, body.width);
                out.forward(tape, ps, body.forward(tape, ps, h, batch))
            }
            HeadNet::Conv {
                up1,
                up2,
                out,
                side,
                act,
            } => {
                let p = side / 4;
                let h = u.reshape(batch * self.shape.positions, self.shape.channels);
                let (h, s1, _) = up1.forward(tape, ps, h, batch, p, p);
                let (h, _, _) = up2.forward(tape, ps, act.apply(h), batch, s1, s1);
                out.forward(tape, ps, act.apply(h))
            }
        }
    }

    /// Reparameterized encoding of a single sequence with explicit noise.
    pub fn encode<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &TokenSequence,
        noise: &[F],
    ) -> Result<EncoderOutput<F>> {
        if noise.len() != self.shape.dim() {
            return Err(CouplingError::Shape(format!(
                "noise has {} entries, latent layout needs {}",
                noise.len(),
                self.shape.dim()
            )));
        }
        let tokens = flatten_tokens(std::slice::from_ref(x), self.seq_len, self.vocab_size)?;
        let tape = Tape::new();
        let mean = self.mean_var(&tape, ps, &tokens, 1).value().into_vec();
        let sigma = F::of(self.noise_std);
        let u: Vec<F> = mean.iter().zip(noise).map(|(&m, &e)| m + sigma * e).collect();
        Ok(EncoderOutput {
            sampled_u: ContinuousRepresentation::new(self.shape, u)?,
            mean,
            noise_std: sigma,
            noise: noise.to_vec(),
        })
    }

    /// Per-position reconstruction logits for a single representation.
    pub fn reconstruct<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        u: &ContinuousRepresentation<F>,
    ) -> Result<LogitGrid<F>> {
        if u.shape() != self.shape {
            return Err(CouplingError::Shape("representation shape differs from the encoder layout".into()));
        }
        let tape = Tape::new();
        let logits = self.head_logits(&tape, ps, tape.constant(u.to_row()), 1);
        LogitGrid::new(logits.value())
    }
}

/// Per-example summed negative log-likelihood: `(batch * T) x V` logits against
/// flattened targets, returned as `batch x 1`.
pub fn sequence_nll_rows<'t, F: Scalar>(logits: Var<'t, F>, targets: &[usize], batch: usize) -> Var<'t, F> {
    let t = targets.len() / batch;
    -logits.log_softmax().pick(targets).reshape(batch, t).sum_rows()
}

/// Closed-form `KL(N(mean, sigma^2 I) || N(0, I))` per row, `batch x 1`.
pub fn kl_rows<'t, F: Scalar>(mean: Var<'t, F>, sigma: F) -> Var<'t, F> {
    let d = F::of_usize(mean.cols());
    let constant = F::of(0.5) * d * (sigma * sigma - F::one() - (sigma * sigma).ln());
    mean.square().sum_rows().scale(F::of(0.5)).shift(constant)
}

/// `-sum_t log softmax(logits_t)[x_t]`.
pub fn reconstruction_loss<F: Scalar>(logits: &LogitGrid<F>, x: &TokenSequence) -> Result<F> {
    if logits.len() != x.len() {
        return Err(CouplingError::Shape(format!(
            "{} logit rows for a sequence of length {}",
            logits.len(),
            x.len()
        )));
    }
    let v = logits.vocab_size();
    let mut total = F::zero();
    for (pos, &tok) in x.tokens().iter().enumerate() {
        if tok >= v {
            return Err(CouplingError::TokenOutOfRange { token: tok, vocab: v });
        }
        let row = logits.values().row(pos);
        total += log_sum_exp(row) - row[tok];
    }
    Ok(total)
}

/// `sum_d 1/2 (sigma^2 + mean_d^2 - 1 - ln sigma^2)`.
pub fn kl_loss<F: Scalar>(mean: &[F], sigma: F) -> Result<F> {
    if !(sigma > F::zero()) || !sigma.is_finite() {
        return Err(CouplingError::InvalidArgument(format!("noise std must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(mean
        .iter()
        .map(|&m| F::of(0.5) * (s2 + m * m - F::one() - s2.ln()))
        .sum())
}
