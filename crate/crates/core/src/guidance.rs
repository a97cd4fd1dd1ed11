//! Steering the one-step generator: classifier-free guidance, gradient ascent
//! on the latent, and reward fine-tuning with an anchor to the starting
//! weights. Rewards see relaxed (probability-valued) sequences.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{AnchorKind, ExperimentConfig, RelaxationMode as Relaxation};
use crate::error::{CouplingError, Result};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::{grad_norm, AdamW};
use crate::scalar::Scalar;
use crate::stage_b::{prior_draws, OneStepGenerator};
use crate::tensor::Tensor;
use crate::training::{epoch_rng, init_rng, minibatches, Phase, TrainRecord};
use crate::types::{flatten_tokens, GaussianLatent, LogitGrid, TokenSequence};

/// `l_u + s (l_c - l_u)` elementwise, evaluated as `(1 - s) l_u + s l_c` so
/// that `s = 0` and `s = 1` return the inputs bit for bit.
pub fn combine_cfg<F: Scalar>(conditional: &Tensor<F>, unconditional: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    if conditional.shape() != unconditional.shape() {
        return Err(CouplingError::Shape("guidance logits differ in shape".into()));
    }
    let (a, b) = (F::of(1.0 - scale), F::of(scale));
    Ok(unconditional.zip_map(conditional, |u, c| a * u + b * c))
}

/// Guided logits for a batch: one conditional and one unconditional
/// evaluation per latent row.
pub fn cfg_logits_batch<F: Scalar>(
    generator: &OneStepGenerator<F>,
    z: &Tensor<F>,
    labels: &[usize],
    scale: f64,
) -> Result<Tensor<F>> {
    if !generator.is_conditional() {
        return Err(CouplingError::Unsupported(
            "classifier-free guidance needs a conditional generator".into(),
        ));
    }
    let c = generator.logits_batch(z, Some(labels))?;
    let u = generator.logits_batch(z, None)?;
    combine_cfg(&c, &u, scale)
}

pub fn cfg_logits<F: Scalar>(
    generator: &OneStepGenerator<F>,
    z: &GaussianLatent<F>,
    label: usize,
    scale: f64,
) -> Result<LogitGrid<F>> {
    LogitGrid::new(cfg_logits_batch(generator, &z.to_row(), &[label], scale)?)
}

/// Relaxed sequence on a tape. `gumbel` holds the Gumbel noise for the
/// straight-through mode and is drawn when absent.
pub fn relax_var<'t, F: Scalar, R: Rng + ?Sized>(
    logits: Var<'t, F>,
    mode: Relaxation,
    temperature: f64,
    gumbel: Option<&Tensor<F>>,
    rng: &mut R,
) -> Var<'t, F> {
    let inv = F::of(1.0 / temperature);
    match mode {
        Relaxation::Soft => logits.scale(inv).softmax(),
        Relaxation::Gumbel => {
            let (r, c) = logits.shape();
            let noise = match gumbel {
                Some(g) => g.clone(),
                None => gumbel_noise(r, c, rng),
            };
            let soft = (logits + logits.tape().constant(noise)).scale(inv).softmax();
            let value = soft.value();
            let hard = Tensor::from_fn(r, c, |i, j| {
                if j == crate::stage_b::argmax(value.row(i)) {
                    F::one()
                } else {
                    F::zero()
                }
            });
            soft.straight_through(hard)
        }
    }
}

pub fn gumbel_noise<F: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        F::of(-(-u.ln()).ln())
    })
}

/// Value-level relaxation of a logit grid.
pub fn relax<F: Scalar, R: Rng + ?Sized>(
    logits: &LogitGrid<F>,
    mode: Relaxation,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if !(temperature > 0.0) {
        return Err(CouplingError::InvalidArgument("relaxation temperature must be positive".into()));
    }
    let tape = Tape::new();
    Ok(relax_var(tape.constant(logits.values().clone()), mode, temperature, None, rng).value())
}

/// A differentiable reward over relaxed sequences.
pub trait RewardModel<F: Scalar> {
    /// Rewards `batch x 1` for relaxed rows `(batch * T) x V`.
    fn reward_var<'t>(&self, tape: &'t Tape<F>, relaxed: Var<'t, F>, labels: Option<&[usize]>, batch: usize)
        -> Result<Var<'t, F>>;
}

/// `R = sum_{t,v} w_{t,v} rho_{t,v}`.
#[derive(Clone, Debug)]
pub struct LinearReward<F> {
    pub weights: Tensor<F>,
}

impl<F: Scalar> RewardModel<F> for LinearReward<F> {
    fn reward_var<'t>(&self, tape: &'t Tape<F>, relaxed: Var<'t, F>, _: Option<&[usize]>, batch: usize) -> Result<Var<'t, F>> {
        let (rows, v) = relaxed.shape();
        if self.weights.len() != rows / batch * v {
            return Err(CouplingError::Shape("reward weights do not match the sequence shape".into()));
        }
        let w = self.weights.clone().reshaped(self.weights.len(), 1)?;
        Ok(relaxed.reshape(batch, rows / batch * v).matmul(tape.constant(w)))
    }
}

/// `R = -||rho - target||^2`.
#[derive(Clone, Debug)]
pub struct QuadraticReward<F> {
    pub target: Tensor<F>,
}

impl<F: Scalar> RewardModel<F> for QuadraticReward<F> {
    fn reward_var<'t>(&self, tape: &'t Tape<F>, relaxed: Var<'t, F>, _: Option<&[usize]>, batch: usize) -> Result<Var<'t, F>> {
        let (rows, v) = relaxed.shape();
        let per = rows / batch * v;
        if self.target.len() != per {
            return Err(CouplingError::Shape("reward target does not match the sequence shape".into()));
        }
        let target = Tensor::from_fn(batch, per, |_, c| self.target.data()[c]);
        let diff = relaxed.reshape(batch, per) - tape.constant(target);
        Ok(-diff.square().sum_cols())
    }
}

/// MLP classifier over flattened token probabilities; as a reward it returns
/// `log p(y | rho)`.
#[derive(Clone, Debug)]
pub struct TokenClassifier<F: Scalar> {
    store: ParamStore<F>,
    net: Mlp,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl<F: Scalar> TokenClassifier<F> {
    pub fn new<R: Rng + ?Sized>(seq_len: usize, vocab_size: usize, num_classes: usize, width: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "classifier",
            &[seq_len * vocab_size, width, width, num_classes],
            Activation::Relu,
            false,
            rng,
        );
        TokenClassifier {
            store,
            net,
            seq_len,
            vocab_size,
            num_classes,
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    fn log_probs_var<'t>(&self, tape: &'t Tape<F>, relaxed: Var<'t, F>, batch: usize) -> Var<'t, F> {
        let x = relaxed.reshape(batch, self.seq_len * self.vocab_size);
        self.net.forward(tape, &self.store, x).log_softmax()
    }

    fn one_hot_rows(&self, xs: &[TokenSequence]) -> Result<Tensor<F>> {
        let flat = flatten_tokens(xs, self.seq_len, self.vocab_size)?;
        Ok(Tensor::one_hot(&flat, self.vocab_size))
    }

    /// Supervised training on discrete sequences; returns the last epoch's mean loss.
    pub fn fit(&mut self, xs: &[TokenSequence], labels: &[usize], epochs: usize, seed: u64) -> Result<f64> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(CouplingError::InvalidArgument("one label per example required".into()));
        }
        let mut opt = AdamW::new(&self.store, F::of(1e-4));
        let mut last = 0.0;
        for epoch in 0..epochs {
            let mut rng = epoch_rng(seed ^ 0xc1a5, Phase::RewardFt, epoch);
            let mut total = 0.0;
            let batches = minibatches(xs.len(), 128, &mut rng);
            let count = batches.len();
            for idx in batches {
                let batch: Vec<TokenSequence> = idx.iter().map(|&i| xs[i].clone()).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let tape = Tape::new();
                let x = tape.constant(self.one_hot_rows(&batch)?);
                let loss = (-self.log_probs_var(&tape, x, idx.len()).pick(&y)).mean();
                total += loss.item().as_f64();
                let grads = tape.backward(loss).for_store(&self.store);
                opt.step(&mut self.store, &grads, F::of(1e-3));
            }
            last = total / count as f64;
        }
        Ok(last)
    }

    pub fn predict(&self, xs: &[TokenSequence]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(512) {
            let tape = Tape::new();
            let x = tape.constant(self.one_hot_rows(chunk)?);
            let lp = self.log_probs_var(&tape, x, chunk.len()).value();
            out.extend((0..chunk.len()).map(|r| crate::stage_b::argmax(lp.row(r))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, xs: &[TokenSequence], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(xs)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / xs.len().max(1) as f64)
    }
}

impl<F: Scalar> RewardModel<F> for TokenClassifier<F> {
    fn reward_var<'t>(&self, tape: &'t Tape<F>, relaxed: Var<'t, F>, labels: Option<&[usize]>, batch: usize) -> Result<Var<'t, F>> {
        let labels = labels.ok_or_else(|| CouplingError::InvalidArgument("classifier reward needs labels".into()))?;
        if labels.iter().any(|&y| y >= self.num_classes) || labels.len() != batch {
            return Err(CouplingError::InvalidArgument("labels out of range for the classifier".into()));
        }
        Ok(self.log_probs_var(tape, relaxed, batch).pick(labels))
    }
}

/// Relaxation and reward settings shared by latent guidance and fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxSpec {
    pub mode: Relaxation,
    pub temperature: f64,
}

/// Mean reward of the relaxed generator output at `z`, one evaluation per row.
pub fn mean_reward<F: Scalar, R: Rng + ?Sized>(
    generator: &OneStepGenerator<F>,
    z: &Tensor<F>,
    labels: Option<&[usize]>,
    reward: &dyn RewardModel<F>,
    relax: RelaxSpec,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let logits = generator.logits_var(&tape, tape.constant(z.clone()), labels);
    let rho = relax_var(logits, relax.mode, relax.temperature, None, rng);
    Ok(reward.reward_var(&tape, rho, labels, z.rows())?.mean().item().as_f64())
}

/// Outcome of latent guidance: the final latents and the mean reward seen at
/// each ascent step (before its update).
#[derive(Clone, Debug)]
pub struct LatentGuidanceOutcome<F> {
    pub z: Tensor<F>,
    pub rewards: Vec<f64>,
}

/// `z <- z + eta grad_z R(relax(G(z, y)), y)` for `steps` steps, one generator
/// evaluation each. The generator is read-only.
#[allow(clippy::too_many_arguments)]
pub fn latent_guidance<F: Scalar, R: Rng + ?Sized>(
    generator: &OneStepGenerator<F>,
    z0: &Tensor<F>,
    labels: Option<&[usize]>,
    reward: &dyn RewardModel<F>,
    step_size: f64,
    steps: usize,
    relax: RelaxSpec,
    rng: &mut R,
) -> Result<LatentGuidanceOutcome<F>> {
    if !(step_size >= 0.0) || !(relax.temperature > 0.0) {
        return Err(CouplingError::InvalidArgument(
            "guidance needs step size >= 0 and a positive relaxation temperature".into(),
        ));
    }
    let mut z = z0.clone();
    let mut rewards = Vec::with_capacity(steps);
    for k in 0..steps {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let logits = generator.logits_var(&tape, zv, labels);
        let rho = relax_var(logits, relax.mode, relax.temperature, None, rng);
        let r = reward.reward_var(&tape, rho, labels, z.rows())?;
        rewards.push(r.mean().item().as_f64());
        let grads = tape.backward(r.sum());
        let g = grads
            .wrt(zv)
            .ok_or_else(|| CouplingError::NonFinite(format!("no latent gradient at guidance step {k}")))?;
        if !g.all_finite() {
            return Err(CouplingError::NonFinite(format!("latent gradient at guidance step {k}")));
        }
        let mut step = g.clone();
        step.scale_assign(F::of(step_size));
        z.add_assign(&step);
    }
    Ok(LatentGuidanceOutcome { z, rewards })
}

/// Reward fine-tuning settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub lambda_reward: f64,
    pub lambda_anchor: f64,
    pub anchor: AnchorKind,
    pub relax: RelaxSpec,
    pub learning_rate: f64,
}

impl FinetuneOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let g = &cfg.guidance;
        FinetuneOptions {
            lambda_reward: g.lambda_reward,
            lambda_anchor: g.lambda_anchor,
            anchor: g.anchor,
            relax: RelaxSpec {
                mode: g.relaxation,
                temperature: g.relaxation_temperature,
            },
            learning_rate: g.finetune_learning_rate,
        }
    }
}

/// Loss parts of one fine-tuning step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneStep {
    pub loss: f64,
    pub mean_reward: f64,
    pub anchor: f64,
    pub grad_norm: f64,
}

/// The generator being tuned together with its frozen starting point.
#[derive(Debug)]
pub struct RewardFinetuner<F: Scalar> {
    pub generator: OneStepGenerator<F>,
    anchor: OneStepGenerator<F>,
    optimizer: AdamW<F>,
}

impl<F: Scalar> RewardFinetuner<F> {
    pub fn new(generator: OneStepGenerator<F>) -> Self {
        let anchor = generator.clone();
        let optimizer = AdamW::new(generator.store(), F::zero());
        RewardFinetuner {
            generator,
            anchor,
            optimizer,
        }
    }

    pub fn anchor(&self) -> &OneStepGenerator<F> {
        &self.anchor
    }

    /// Loss and parameter gradients at the current weights, without updating.
    pub fn loss_and_grads(
        &self,
        z: &Tensor<F>,
        labels: Option<&[usize]>,
        reward: &dyn RewardModel<F>,
        opts: &FinetuneOptions,
        gumbel: Option<&Tensor<F>>,
    ) -> Result<(FinetuneStep, Vec<Option<Tensor<F>>>)> {
        let batch = z.rows();
        let anchor_logits = self.anchor.logits_batch(z, labels)?;
        let tape = Tape::new();
        let logits = self.generator.logits_var(&tape, tape.constant(z.clone()), labels);
        let mut noise_rng = init_rng(0, Phase::RewardFt);
        let rho = relax_var(logits, opts.relax.mode, opts.relax.temperature, gumbel, &mut noise_rng);
        let r = reward.reward_var(&tape, rho, labels, batch)?.mean();
        let target = tape.constant(anchor_logits);
        let anchor = match opts.anchor {
            AnchorKind::LogitMse => (logits - target).square().mean(),
            AnchorKind::Kl => {
                let p0 = target.softmax();
                let lp0 = target.log_softmax();
                let lp = logits.log_softmax();
                p0.mul(lp0 - lp).sum().scale(F::of(1.0 / batch as f64))
            }
        };
        let loss = r.scale(F::of(-opts.lambda_reward)) + anchor.scale(F::of(opts.lambda_anchor));
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(CouplingError::NonFinite("reward fine-tuning loss".into()));
        }
        let grads = tape.backward(loss).for_store(self.generator.store());
        let step = FinetuneStep {
            loss: value,
            mean_reward: r.item().as_f64(),
            anchor: anchor.item().as_f64(),
            grad_norm: grad_norm(&grads).as_f64(),
        };
        Ok((step, grads))
    }

    /// One optimizer step on `-l_r mean R + l_a anchor`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        z: &Tensor<F>,
        labels: Option<&[usize]>,
        reward: &dyn RewardModel<F>,
        opts: &FinetuneOptions,
        rng: &mut R,
    ) -> Result<FinetuneStep> {
        let noise = match opts.relax.mode {
            Relaxation::Gumbel => Some(gumbel_noise(z.rows() * self.generator.seq_len, self.generator.vocab_size, rng)),
            Relaxation::Soft => None,
        };
        let (step, grads) = self.loss_and_grads(z, labels, reward, opts, noise.as_ref())?;
        self.optimizer
            .step(self.generator.store_mut(), &grads, F::of(opts.learning_rate));
        Ok(step)
    }
}

/// `guidance.finetune_steps` steps on prior latents (and uniform labels for a
/// conditional generator).
pub fn reward_finetune<F: Scalar>(
    generator: OneStepGenerator<F>,
    reward: &dyn RewardModel<F>,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<RewardFinetuner<F>> {
    let opts = FinetuneOptions::from_config(cfg);
    let mut tuner = RewardFinetuner::new(generator);
    let bs = cfg.guidance.finetune_batch_size;
    for step in 0..cfg.guidance.finetune_steps {
        let mut rng = epoch_rng(cfg.seed, Phase::RewardFt, step);
        let z = prior_draws(bs, tuner.generator.shape.dim(), cfg.stage_b.z_scale, &mut rng);
        let labels: Option<Vec<usize>> = tuner
            .generator
            .is_conditional()
            .then(|| (0..bs).map(|_| rng.random_range(0..tuner.generator.num_classes)).collect());
        let s = tuner.step(&z, labels.as_deref(), reward, &opts, &mut rng)?;
        log(&TrainRecord {
            stage: Phase::RewardFt,
            epoch: 0,
            step: step as u64 + 1,
            total: s.loss,
            rec: None,
            kl: None,
            flow: None,
            lr: opts.learning_rate,
        });
    }
    Ok(tuner)
}
