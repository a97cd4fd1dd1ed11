//! Latent-conditioned masked denoiser, the masked-token objective, and the
//! few-step self-planning sampler. With the latent pathway removed the same
//! machinery gives the plain masked-diffusion baseline.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Arch, ExperimentConfig, ScheduleKind};
use crate::error::{CouplingError, Result};
use crate::nn::{Linear, Mlp, ParamStore, Transformer};
use crate::optim::AdamW;
use crate::scalar::{log_sum_exp, Scalar};
use crate::stage_a::{PairSource, StageAState};
use crate::tensor::Tensor;
use crate::training::{epoch_rng, init_rng, minibatches, Phase, TrainRecord};
use crate::types::{values_digest, GaussianLatent, LatentShape, LogitGrid, TokenSequence};

/// Monotone unmasking schedule with `kappa(0) = 0` and `kappa(1) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnmaskSchedule {
    Linear,
    Cosine,
}

impl From<ScheduleKind> for UnmaskSchedule {
    fn from(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Linear => UnmaskSchedule::Linear,
            ScheduleKind::Cosine => UnmaskSchedule::Cosine,
        }
    }
}

impl UnmaskSchedule {
    /// Fraction revealed at time `t`.
    pub fn kappa(self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t == 1.0 {
            return 1.0;
        }
        match self {
            UnmaskSchedule::Linear => t,
            UnmaskSchedule::Cosine => 1.0 - (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    /// `floor(len * (1 - kappa(step / steps)))`, in exact integer arithmetic for
    /// the linear schedule.
    pub fn masked_count(self, len: usize, step: usize, steps: usize) -> usize {
        if step >= steps {
            return 0;
        }
        match self {
            UnmaskSchedule::Linear => len * (steps - step) / steps,
            UnmaskSchedule::Cosine => {
                let m = len as f64 * (1.0 - self.kappa(step as f64 / steps as f64));
                ((m + 1e-9).floor() as usize).min(len)
            }
        }
    }
}

/// Output of [`corrupt`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub masked: TokenSequence,
    pub mask: Vec<bool>,
    pub t: f64,
}

/// Draw `t ~ U(t_min, 1)` and mask each position with probability `t`.
pub fn corrupt<R: Rng + ?Sized>(x: &TokenSequence, t_min: f64, max_resample: usize, rng: &mut R) -> Result<Corruption> {
    let t = t_min + (1.0 - t_min) * rng.random::<f64>();
    corrupt_at(x, t, max_resample, rng)
}

/// Mask at a given rate. An empty mask is redrawn up to `max_resample` times,
/// after which one uniformly chosen position is masked.
pub fn corrupt_at<R: Rng + ?Sized>(x: &TokenSequence, t: f64, max_resample: usize, rng: &mut R) -> Result<Corruption> {
    if x.has_mask() {
        return Err(CouplingError::InvalidArgument("corrupt expects a fully revealed sequence".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CouplingError::InvalidArgument(format!("mask rate {t} outside [0, 1]")));
    }
    let len = x.len();
    let mut mask = vec![false; len];
    for _ in 0..=max_resample {
        for m in mask.iter_mut() {
            *m = rng.random::<f64>() < t;
        }
        if mask.iter().any(|&m| m) {
            break;
        }
    }
    if !mask.iter().any(|&m| m) {
        mask[rng.random_range(0..len)] = true;
    }
    Ok(Corruption {
        masked: x.make_masked_copy(&mask)?,
        mask,
        t,
    })
}

#[derive(Clone, Debug)]
enum DenoiserNet {
    Mlp(Mlp),
    Transformer {
        input: Linear,
        latent: Option<Linear>,
        body: Transformer,
        out: Linear,
        tokens: usize,
    },
}

/// `H(x_t, z)`: logits over the `V` data tokens at every position. The mask
/// token is an input symbol only.
#[derive(Debug)]
pub struct MaskedDenoiser<F: Scalar> {
    store: ParamStore<F>,
    net: DenoiserNet,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// `None` for the plain baseline.
    pub latent: Option<LatentShape>,
    evaluations: AtomicU64,
}

impl<F: Scalar> Clone for MaskedDenoiser<F> {
    fn clone(&self) -> Self {
        MaskedDenoiser {
            store: self.store.clone(),
            net: self.net.clone(),
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            latent: self.latent,
            evaluations: AtomicU64::new(0),
        }
    }
}

impl<F: Scalar> MaskedDenoiser<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, with_latent: bool, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let (t, v) = (cfg.data.seq_len, cfg.data.vocab_size);
        let latent = with_latent.then(|| LatentShape::new(cfg.model.latent_positions, cfg.model.latent_channels));
        let d = latent.map_or(0, |s| s.dim());
        let nc = &cfg.mdm.denoiser;
        let net = match nc.arch {
            Arch::Transformer => {
                let tokens = nc.tokens.unwrap_or(t);
                let chunk = t / tokens;
                let w = nc.width;
                DenoiserNet::Transformer {
                    input: Linear::new(&mut store, "denoiser.input", chunk * (v + 1), w, rng),
                    latent: with_latent.then(|| Linear::new(&mut store, "denoiser.latent", d, tokens * w, rng)),
                    body: Transformer::new(&mut store, "denoiser.body", tokens, w, nc.depth, nc.heads, rng),
                    out: Linear::new(&mut store, "denoiser.out", w, chunk * v, rng),
                    tokens,
                }
            }
            _ => {
                let mut dims = vec![t * (v + 1) + d];
                dims.extend(std::iter::repeat_n(nc.width, nc.depth));
                dims.push(t * v);
                DenoiserNet::Mlp(Mlp::new(&mut store, "denoiser.mlp", &dims, cfg.model.activation, false, rng))
            }
        };
        MaskedDenoiser {
            store,
            net,
            seq_len: t,
            vocab_size: v,
            latent,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Denoiser evaluations so far, counted per sequence.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn check_latents(&self, z: Option<&Tensor<F>>, batch: usize) -> Result<()> {
        match (self.latent, z) {
            (Some(shape), Some(z)) if z.rows() == batch && z.cols() == shape.dim() => {
                if z.all_finite() {
                    Ok(())
                } else {
                    Err(CouplingError::NonFinite("denoiser latent".into()))
                }
            }
            (Some(shape), Some(z)) => Err(CouplingError::Shape(format!(
                "expected {batch} x {} latents, got {} x {}",
                shape.dim(),
                z.rows(),
                z.cols()
            ))),
            (Some(_), None) => Err(CouplingError::InvalidArgument("this denoiser needs a latent".into())),
            (None, Some(_)) => Err(CouplingError::InvalidArgument("the plain denoiser takes no latent".into())),
            (None, None) => Ok(()),
        }
    }

    /// Logits `(batch * T) x V` for flat tokens (mask index `V`).
    fn logits_var<'t>(&self, tape: &'t Tape<F>, tokens: &[usize], z: Option<&Tensor<F>>) -> Var<'t, F> {
        let (t, v) = (self.seq_len, self.vocab_size);
        let batch = tokens.len() / t;
        self.evaluations.fetch_add(batch as u64, Ordering::Relaxed);
        let onehot = Tensor::one_hot(tokens, v + 1);
        match &self.net {
            DenoiserNet::Mlp(net) => {
                let x = tape.constant(onehot).reshape(batch, t * (v + 1));
                let input = match z {
                    Some(z) => Var::concat_cols(&[x, tape.constant(z.clone())]),
                    None => x,
                };
                net.forward(tape, &self.store, input).reshape(batch * t, v)
            }
            DenoiserNet::Transformer {
                input,
                latent,
                body,
                out,
                tokens: g,
            } => {
                let chunk = t / g;
                let x = tape.constant(onehot).reshape(batch * g, chunk * (v + 1));
                let mut h = input.forward(tape, &self.store, x);
                if let (Some(proj), Some(z)) = (latent, z) {
                    h = h + proj
                        .forward(tape, &self.store, tape.constant(z.clone()))
                        .reshape(batch * g, body.width);
                }
                out.forward(tape, &self.store, body.forward(tape, &self.store, h, batch))
                    .reshape(batch * t, v)
            }
        }
    }

    /// Logits for a batch of partially masked sequences.
    pub fn logits_batch(&self, xs: &[TokenSequence], z: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let tokens = self.flat_inputs(xs)?;
        self.check_latents(z, xs.len())?;
        let tape = Tape::new();
        Ok(self.logits_var(&tape, &tokens, z).value())
    }

    pub fn denoise(&self, x: &TokenSequence, z: Option<&GaussianLatent<F>>) -> Result<LogitGrid<F>> {
        let z = z.map(GaussianLatent::to_row);
        LogitGrid::new(self.logits_batch(std::slice::from_ref(x), z.as_ref())?)
    }

    fn flat_inputs(&self, xs: &[TokenSequence]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(xs.len() * self.seq_len);
        for x in xs {
            if x.len() != self.seq_len || x.vocab_size() != self.vocab_size {
                return Err(CouplingError::Shape(format!(
                    "denoiser expects length {} over {} tokens",
                    self.seq_len, self.vocab_size
                )));
            }
            out.extend_from_slice(x.tokens());
        }
        Ok(out)
    }

    /// Per-sequence masked-token NLL on a tape, averaged over the batch.
    fn masked_loss_var<'t>(
        &self,
        tape: &'t Tape<F>,
        corrupted: &[Corruption],
        targets: &[&TokenSequence],
        z: Option<&Tensor<F>>,
    ) -> Result<Var<'t, F>> {
        let inputs: Vec<TokenSequence> = corrupted.iter().map(|c| c.masked.clone()).collect();
        let tokens = self.flat_inputs(&inputs)?;
        self.check_latents(z, inputs.len())?;
        let batch = inputs.len();
        let mut target_idx = Vec::with_capacity(tokens.len());
        let mut weights = Vec::with_capacity(tokens.len());
        for (c, x) in corrupted.iter().zip(targets) {
            let count = c.mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(CouplingError::InvalidArgument("corruption with no masked position".into()));
            }
            for (&m, &tok) in c.mask.iter().zip(x.tokens()) {
                target_idx.push(tok);
                weights.push(if m { F::of(1.0 / (count * batch) as f64) } else { F::zero() });
            }
        }
        let nll = -self.logits_var(tape, &tokens, z).log_softmax().pick(&target_idx);
        let w = tape.constant(Tensor::from_vec(weights.len(), 1, weights)?);
        Ok(nll.mul(w).sum())
    }

    /// `(1 / |m|) sum_{i: m_i} -log p(x_i | x_t, z)` for one draw of the corruption.
    pub fn mdm_loss<R: Rng + ?Sized>(
        &self,
        z: Option<&GaussianLatent<F>>,
        x: &TokenSequence,
        t_min: f64,
        max_resample: usize,
        rng: &mut R,
    ) -> Result<F> {
        let c = corrupt(x, t_min, max_resample, rng)?;
        self.mdm_loss_for(z, x, &c)
    }

    pub fn mdm_loss_for(&self, z: Option<&GaussianLatent<F>>, x: &TokenSequence, c: &Corruption) -> Result<F> {
        Ok(self.mdm_loss_and_grads(z, x, c)?.0)
    }

    /// Loss for one corruption and its gradient for every parameter in [`Self::store`].
    pub fn mdm_loss_and_grads(
        &self,
        z: Option<&GaussianLatent<F>>,
        x: &TokenSequence,
        c: &Corruption,
    ) -> Result<(F, Vec<Option<Tensor<F>>>)> {
        let z = z.map(GaussianLatent::to_row);
        let tape = Tape::new();
        let loss = self.masked_loss_var(&tape, std::slice::from_ref(c), &[x], z.as_ref())?;
        Ok((loss.item(), tape.backward(loss).for_store(&self.store)))
    }
}

/// Sampler settings.
#[derive(Clone, Debug, PartialEq)]
pub struct P2SelfOptions {
    pub steps: usize,
    pub schedule: UnmaskSchedule,
    pub temperatures: Vec<f64>,
    pub remask_strength: f64,
}

impl P2SelfOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        P2SelfOptions {
            steps: cfg.mdm.steps,
            schedule: cfg.mdm.schedule.into(),
            temperatures: cfg.mdm.step_temperatures(cfg.mdm.steps),
            remask_strength: cfg.mdm.remask_strength,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CouplingError::InvalidArgument("at least one sampling step required".into()));
        }
        if self.temperatures.len() != self.steps {
            return Err(CouplingError::InvalidArgument(format!(
                "{} temperatures for {} steps",
                self.temperatures.len(),
                self.steps
            )));
        }
        if self.temperatures.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(CouplingError::InvalidArgument("temperatures must be positive".into()));
        }
        if !self.remask_strength.is_finite() {
            return Err(CouplingError::InvalidArgument("remask strength must be finite".into()));
        }
        Ok(())
    }
}

/// A finished sample plus the bookkeeping the sampler contracts are checked on.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub sequence: TokenSequence,
    /// Masked non-fixed positions after each step.
    pub mask_counts: Vec<usize>,
    /// Latent digest consumed at each step.
    pub latent_digests: Vec<String>,
    /// Sequence state after each step.
    pub states: Vec<TokenSequence>,
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Gumbel-max draw from `softmax(row / tau)`. The confidence score is the
/// log-softmax of the perturbed logits `row / tau + g` at the drawn token, so
/// the noise also randomizes the reveal order.
fn propose<F: Scalar, R: Rng + ?Sized>(row: &[F], tau: f64, rng: &mut R) -> (usize, f64) {
    let noisy: Vec<f64> = row.iter().map(|l| l.as_f64() / tau + gumbel(rng)).collect();
    let best = noisy
        .iter()
        .enumerate()
        .fold(0, |b, (k, &v)| if v > noisy[b] { k } else { b });
    (best, noisy[best] - log_sum_exp(&noisy))
}

/// Few-step sampling for `n` sequences. `z` holds one latent row per sequence
/// (absent for the plain denoiser); `fixed[j] = Some(tok)` pins position `j`.
pub fn p2_self_sample_batch<F: Scalar, R: Rng + ?Sized>(
    denoiser: &MaskedDenoiser<F>,
    z: Option<&Tensor<F>>,
    n: usize,
    fixed: &[Option<usize>],
    opts: &P2SelfOptions,
    rng: &mut R,
) -> Result<Vec<SampleTrace>> {
    opts.validate()?;
    let (len, v) = (denoiser.seq_len, denoiser.vocab_size);
    let fixed: Vec<Option<usize>> = if fixed.is_empty() { vec![None; len] } else { fixed.to_vec() };
    if fixed.len() != len {
        return Err(CouplingError::Shape("one fixed-position entry per position required".into()));
    }
    if let Some(&tok) = fixed.iter().flatten().find(|&&t| t >= v) {
        return Err(CouplingError::TokenOutOfRange { token: tok, vocab: v });
    }
    denoiser.check_latents(z, n)?;
    let free: Vec<usize> = (0..len).filter(|&j| fixed[j].is_none()).collect();
    let start: Vec<usize> = fixed.iter().map(|f| f.unwrap_or(v)).collect();
    let mut states: Vec<Vec<usize>> = vec![start; n];
    let mut traces: Vec<SampleTrace> = (0..n)
        .map(|_| SampleTrace {
            sequence: TokenSequence::all_masked(len, v),
            mask_counts: Vec::with_capacity(opts.steps),
            latent_digests: Vec::with_capacity(opts.steps),
            states: Vec::with_capacity(opts.steps),
        })
        .collect();
    let row_digests: Vec<String> = match z {
        Some(z) => (0..n).map(|i| values_digest(z.row(i))).collect(),
        None => vec![String::new(); n],
    };
    for step in 1..=opts.steps {
        let tau = opts.temperatures[step - 1];
        let keep_masked = opts.schedule.masked_count(free.len(), step, opts.steps);
        let inputs: Vec<TokenSequence> = states
            .iter()
            .map(|s| TokenSequence::with_mask(s.clone(), v))
            .collect::<Result<_>>()?;
        let logits = denoiser.logits_batch(&inputs, z)?;
        for (i, state) in states.iter_mut().enumerate() {
            let mut proposal = vec![0usize; len];
            let mut score = vec![f64::INFINITY; len];
            for j in 0..len {
                let (tok, lp) = propose(logits.row(i * len + j), tau, rng);
                proposal[j] = tok;
                if fixed[j].is_none() {
                    score[j] = if state[j] == v { lp } else { lp * opts.remask_strength };
                }
            }
            let mut order = free.clone();
            order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
            let remask = &order[..keep_masked];
            let mut in_remask = vec![false; len];
            for &j in remask {
                in_remask[j] = true;
            }
            for &j in &free {
                if in_remask[j] {
                    state[j] = v;
                } else if state[j] == v {
                    state[j] = proposal[j];
                }
            }
            if step == opts.steps {
                for &j in &free {
                    if state[j] == v {
                        state[j] = proposal[j];
                    }
                }
            }
            let trace = &mut traces[i];
            trace.mask_counts.push(free.iter().filter(|&&j| state[j] == v).count());
            trace.latent_digests.push(row_digests[i].clone());
            trace.states.push(TokenSequence::with_mask(state.clone(), v)?);
        }
    }
    for (trace, state) in traces.iter_mut().zip(states) {
        trace.sequence = TokenSequence::new(state, v)?;
    }
    Ok(traces)
}

/// Single-sequence form of [`p2_self_sample_batch`].
pub fn p2_self_sample<F: Scalar, R: Rng + ?Sized>(
    denoiser: &MaskedDenoiser<F>,
    z: Option<&GaussianLatent<F>>,
    opts: &P2SelfOptions,
    rng: &mut R,
) -> Result<TokenSequence> {
    let z = z.map(GaussianLatent::to_row);
    let mut out = p2_self_sample_batch(denoiser, z.as_ref(), 1, &[], opts, rng)?;
    Ok(out.remove(0).sequence)
}

/// One denoiser call on the all-mask input, every position drawn by Gumbel-max
/// at temperature `tau`. Consumes randomness in the same order as a one-step
/// [`p2_self_sample_batch`].
pub fn parallel_decode<F: Scalar, R: Rng + ?Sized>(
    denoiser: &MaskedDenoiser<F>,
    z: Option<&Tensor<F>>,
    n: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    let (len, v) = (denoiser.seq_len, denoiser.vocab_size);
    let inputs = vec![TokenSequence::all_masked(len, v); n];
    let logits = denoiser.logits_batch(&inputs, z)?;
    (0..n)
        .map(|i| {
            let toks = (0..len).map(|j| propose(logits.row(i * len + j), tau, rng).0).collect();
            TokenSequence::new(toks, v)
        })
        .collect()
}

/// Denoiser with optimizer state and epoch counter.
#[derive(Debug)]
pub struct MdmState<F: Scalar> {
    pub denoiser: MaskedDenoiser<F>,
    optimizer: AdamW<F>,
    epoch: usize,
    phase: Phase,
}

impl<F: Scalar> MdmState<F> {
    /// Latent-conditioned when `with_latent`, otherwise the plain baseline.
    pub fn new(cfg: &ExperimentConfig, with_latent: bool) -> Self {
        let phase = if with_latent { Phase::Mdm } else { Phase::Baseline };
        let denoiser = MaskedDenoiser::new(cfg, with_latent, &mut init_rng(cfg.seed, phase));
        let optimizer = AdamW::new(denoiser.store(), F::of(cfg.mdm.weight_decay));
        MdmState {
            denoiser,
            optimizer,
            epoch: 0,
            phase,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// One epoch over `data`, with latents from `latents` (one row per example)
    /// for the conditioned denoiser.
    pub fn train_epoch(
        &mut self,
        data: &[TokenSequence],
        latents: Option<&Tensor<F>>,
        cfg: &ExperimentConfig,
        log: &mut dyn FnMut(&TrainRecord),
    ) -> Result<()> {
        let mc = &cfg.mdm;
        let mut rng = epoch_rng(cfg.seed, self.phase, self.epoch);
        for idx in minibatches(data.len(), mc.batch_size, &mut rng) {
            let targets: Vec<&TokenSequence> = idx.iter().map(|&i| &data[i]).collect();
            let corrupted = targets
                .iter()
                .map(|x| corrupt(x, mc.t_min, mc.max_resample, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let z = latents.map(|l| l.select_rows(&idx));
            let tape = Tape::new();
            let loss = self.denoiser.masked_loss_var(&tape, &corrupted, &targets, z.as_ref())?;
            let total = loss.item();
            if !total.is_finite() {
                return Err(CouplingError::NonFinite(format!(
                    "denoiser loss diverged at epoch {} step {}",
                    self.epoch, self.optimizer.step
                )));
            }
            let grads = tape.backward(loss).for_store(self.denoiser.store());
            let lr = mc.learning_rate;
            self.optimizer.step(&mut self.denoiser.store, &grads, F::of(lr));
            log(&TrainRecord {
                stage: self.phase,
                epoch: self.epoch,
                step: self.optimizer.step,
                total: total.as_f64(),
                rec: None,
                kl: None,
                flow: None,
                lr,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", self.phase.name());
        ck.set_meta("config", cfg.to_toml_string());
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("digest", self.denoiser.digest());
        ck.add_store(self.denoiser.store());
        ck.add_optimizer("mdm.optim", &self.optimizer, self.denoiser.store());
        ck
    }

    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.meta_value("kind")?;
        let with_latent = match kind.as_str() {
            "mdm" => true,
            "baseline" => false,
            other => {
                return Err(CouplingError::Prerequisite(format!(
                    "expected a denoiser checkpoint, found `{other}`"
                )))
            }
        };
        let mut state = MdmState::new(cfg, with_latent);
        ck.restore_store(&mut state.denoiser.store)?;
        ck.restore_optimizer("mdm.optim", &mut state.optimizer, state.denoiser.store())?;
        state.epoch = ck.meta_value("epoch")?;
        Ok(state)
    }
}

/// Pair stream for denoiser training, kept apart from the stage B stream.
pub fn pair_source<F: Scalar>(cfg: &ExperimentConfig) -> PairSource<F> {
    PairSource::new(cfg.stage_a.pair_mode, cfg.seed ^ 0x6d64_6d00)
}

/// Train the latent-conditioned denoiser on pairs from a frozen stage A.
pub fn train_mdm<F: Scalar>(
    data: &[TokenSequence],
    stage_a: &StageAState<F>,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<MdmState<F>> {
    let mut state = MdmState::new(cfg, true);
    resume_mdm(&mut state, data, stage_a, cfg, log)?;
    Ok(state)
}

pub fn resume_mdm<F: Scalar>(
    state: &mut MdmState<F>,
    data: &[TokenSequence],
    stage_a: &StageAState<F>,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<()> {
    if !stage_a.is_frozen() {
        return Err(CouplingError::NotFrozen("the denoiser needs a frozen stage A".into()));
    }
    if data.is_empty() {
        return Err(CouplingError::InvalidArgument("empty training set".into()));
    }
    let mut source = pair_source(cfg);
    while state.epoch < cfg.mdm.epochs {
        let pairs = source.for_epoch(data, stage_a, state.epoch)?.into_owned();
        state.train_epoch(pairs.sequences(), Some(pairs.latents()), cfg, log)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(profile: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::profile(profile).unwrap();
        cfg.mdm.denoiser.width = 16;
        cfg.mdm.denoiser.depth = 1;
        cfg.mdm.denoiser.heads = 2;
        cfg
    }

    #[test]
    fn schedules_hit_endpoints_and_are_monotone() {
        for s in [UnmaskSchedule::Linear, UnmaskSchedule::Cosine] {
            assert_eq!(s.kappa(0.0), 0.0);
            assert_eq!(s.kappa(1.0), 1.0);
            let mut prev = 0.0;
            for i in 0..=100 {
                let k = s.kappa(i as f64 / 100.0);
                assert!(k >= prev);
                prev = k;
            }
            assert_eq!(s.masked_count(8, 0, 4), 8);
            assert_eq!(s.masked_count(8, 4, 4), 0);
        }
        for k in 1..=8 {
            for i in 0..=k {
                assert_eq!(UnmaskSchedule::Linear.masked_count(7, i, k), (7.0 * (1.0 - i as f64 / k as f64)).floor() as usize);
            }
        }
    }

    #[test]
    fn corrupt_edge_cases() {
        let x = TokenSequence::new(vec![1, 0, 2, 1], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_at(&x, 1.0, 100, &mut rng).unwrap();
        assert!(c.mask.iter().all(|&m| m));
        assert_eq!(c.masked.masked_count(), 4);
        let one = TokenSequence::new(vec![2], 3).unwrap();
        for _ in 0..200 {
            let c = corrupt_at(&one, 1e-3, 100, &mut rng).unwrap();
            assert_eq!(c.mask, vec![true]);
        }
        let c = corrupt_at(&x, 0.0, 3, &mut rng).unwrap();
        assert_eq!(c.masked.masked_count(), 1);
        assert!(corrupt(&c.masked, 1e-3, 100, &mut rng).is_err());
    }

    #[test]
    fn mask_count_matches_binomial_mean() {
        let x = TokenSequence::new(vec![0; 8], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 0.3;
        let n = 100_000;
        let total: usize = (0..n).map(|_| corrupt_at(&x, t, 100, &mut rng).unwrap().masked.masked_count()).sum();
        // The empty-mask guard shifts the mean up by P(empty) * (E[count | redraw]).
        let p_empty = (1.0 - t).powi(8);
        let mean = 8.0 * t + p_empty * 8.0 * t / (1.0 - p_empty);
        let sd = (8.0 * t * (1.0 - t) / n as f64).sqrt();
        let got = total as f64 / n as f64;
        assert!((got - mean).abs() < 3.0 * sd, "{got} vs {mean}");

        // At a rate where the guard almost never fires the plain binomial mean holds.
        let t = 0.7;
        let total: usize = (0..n).map(|_| corrupt_at(&x, t, 100, &mut rng).unwrap().masked.masked_count()).sum();
        let sd = (8.0 * t * (1.0 - t) / n as f64).sqrt();
        assert!((total as f64 / n as f64 - 8.0 * t).abs() < 3.0 * sd);
    }

    #[test]
    fn loss_normalizes_over_masked_positions() {
        let cfg = cfg("toy-motif");
        let mut den = MaskedDenoiser::<f64>::new(&cfg, true, &mut ChaCha8Rng::seed_from_u64(0));
        let x = TokenSequence::new(vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        let z = GaussianLatent::new(den.latent.unwrap(), vec![0.3, -0.2, 0.1, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = corrupt_at(&x, 0.5, 100, &mut rng).unwrap();

        // Independent recomputation restricted to masked indices.
        let logits = den.denoise(&c.masked, Some(&z)).unwrap();
        let mut acc = 0.0;
        let mut count = 0;
        for (j, &m) in c.mask.iter().enumerate() {
            if m {
                let row = logits.values().row(j);
                acc += log_sum_exp(row) - row[x.tokens()[j]];
                count += 1;
            }
        }
        assert_relative_eq!(den.mdm_loss_for(Some(&z), &x, &c).unwrap(), acc / count as f64, epsilon = 1e-12);

        for t in den.store_mut().tensors_mut() {
            t.scale_assign(0.0);
        }
        let l = den.mdm_loss(Some(&z), &x, 1e-3, 100, &mut rng).unwrap();
        assert_relative_eq!(l, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sampler_bookkeeping() {
        let cfg = cfg("toy-motif");
        let den = MaskedDenoiser::<f64>::new(&cfg, true, &mut ChaCha8Rng::seed_from_u64(0));
        let z = Tensor::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for schedule in [UnmaskSchedule::Linear, UnmaskSchedule::Cosine] {
            for steps in [1, 2, 3, 8] {
                let opts = P2SelfOptions {
                    steps,
                    schedule,
                    temperatures: vec![0.7; steps],
                    remask_strength: 1.5,
                };
                den.reset_evaluations();
                let traces = p2_self_sample_batch(&den, Some(&z), 3, &[], &opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
                assert_eq!(den.evaluations(), 3 * steps as u64);
                for tr in &traces {
                    let expect: Vec<usize> = (1..=steps).map(|i| schedule.masked_count(8, i, steps)).collect();
                    assert_eq!(tr.mask_counts, expect);
                    assert!(!tr.sequence.has_mask());
                    assert!(tr.latent_digests.windows(2).all(|w| w[0] == w[1]));
                    // Write discipline: a revealed token only changes by being masked first.
                    for w in tr.states.windows(2) {
                        for j in 0..8 {
                            let (a, b) = (w[0].tokens()[j], w[1].tokens()[j]);
                            assert!(a == 4 || b == 4 || a == b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_positions_survive() {
        let cfg = cfg("toy-motif");
        let den = MaskedDenoiser::<f64>::new(&cfg, false, &mut ChaCha8Rng::seed_from_u64(0));
        let fixed = [Some(3), None, None, Some(0), None, None, None, Some(2)];
        let opts = P2SelfOptions {
            steps: 5,
            schedule: UnmaskSchedule::Linear,
            temperatures: vec![1.0; 5],
            remask_strength: 3.0,
        };
        let traces = p2_self_sample_batch(&den, None, 20, &fixed, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for tr in traces {
            for (j, f) in fixed.iter().enumerate() {
                if let Some(tok) = f {
                    assert_eq!(tr.sequence.tokens()[j], *tok);
                }
            }
            assert_eq!(tr.mask_counts, (1..=5).map(|i| 5 * (5 - i) / 5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_step_equals_parallel_decode() {
        let cfg = cfg("toy-motif");
        let den = MaskedDenoiser::<f64>::new(&cfg, true, &mut ChaCha8Rng::seed_from_u64(0));
        let z = Tensor::randn(16, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let opts = P2SelfOptions {
            steps: 1,
            schedule: UnmaskSchedule::Cosine,
            temperatures: vec![0.8],
            remask_strength: 2.0,
        };
        let a: Vec<TokenSequence> = p2_self_sample_batch(&den, Some(&z), 16, &[], &opts, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap()
            .into_iter()
            .map(|t| t.sequence)
            .collect();
        let b = parallel_decode(&den, Some(&z), 16, 0.8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gumbel_max_matches_tempered_softmax() {
        let row = [0.5f64, -1.0, 1.5];
        let tau = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[propose(&row, tau, &mut rng).0] += 1;
        }
        let scaled: Vec<f64> = row.iter().map(|l| l / tau).collect();
        let lse = log_sum_exp(&scaled);
        for k in 0..3 {
            let p = (scaled[k] - lse).exp();
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn argument_errors() {
        let cfg = cfg("toy-pair");
        let den = MaskedDenoiser::<f64>::new(&cfg, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut opts = P2SelfOptions {
            steps: 2,
            schedule: UnmaskSchedule::Linear,
            temperatures: vec![1.0],
            remask_strength: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::zeros(1, 2);
        assert!(p2_self_sample_batch(&den, Some(&z), 1, &[], &opts, &mut rng).is_err());
        opts.temperatures = vec![1.0, 1.0];
        assert!(p2_self_sample_batch(&den, None, 1, &[], &opts, &mut rng).is_err());
        assert!(p2_self_sample_batch(&den, Some(&z), 1, &[], &opts, &mut rng).is_ok());
        opts.steps = 0;
        opts.temperatures.clear();
        assert!(p2_self_sample_batch(&den, Some(&z), 1, &[], &opts, &mut rng).is_err());
    }
}
