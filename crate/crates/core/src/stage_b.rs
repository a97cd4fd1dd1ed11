//! Stage B: the parallel one-step decoder `z -> T x V logits`, its cross-entropy
//! objective, and one-step sampling.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::autoencoder::sequence_nll_rows;
use crate::checkpoint::Checkpoint;
use crate::config::{Arch, ExperimentConfig};
use crate::error::{CouplingError, Result};
use crate::nn::{Embedding, Linear, Mlp, ParamStore, Transformer};
use crate::optim::{clip_grad_norm, AdamW, Ema};
use crate::scalar::{softmax_into, Scalar};
use crate::stage_a::{PairSource, StageAState};
use crate::tensor::Tensor;
use crate::training::{epoch_rng, init_rng, learning_rate, minibatches, steps_per_epoch, Phase, TrainRecord};
use crate::types::{flatten_tokens, GaussianLatent, LatentShape, LogitGrid, TokenSequence};

const LABEL_DIM: usize = 16;

/// Below this temperature sampling takes the per-position argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug)]
enum GeneratorNet {
    Mlp(Mlp),
    Transformer {
        proj: Linear,
        body: Transformer,
        out: Linear,
        tokens: usize,
    },
}

#[derive(Debug)]
pub struct OneStepGenerator<F: Scalar> {
    store: ParamStore<F>,
    net: GeneratorNet,
    /// `C + 1` rows; row `C` is the null label used for unconditional logits.
    labels: Option<Embedding>,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub shape: LatentShape,
    pub num_classes: usize,
    evaluations: AtomicU64,
}

impl<F: Scalar> Clone for OneStepGenerator<F> {
    fn clone(&self) -> Self {
        OneStepGenerator {
            store: self.store.clone(),
            net: self.net.clone(),
            labels: self.labels.clone(),
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            shape: self.shape,
            num_classes: self.num_classes,
            evaluations: AtomicU64::new(0),
        }
    }
}

impl<F: Scalar> OneStepGenerator<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let (t, v) = (cfg.data.seq_len, cfg.data.vocab_size);
        let shape = LatentShape::new(cfg.model.latent_positions, cfg.model.latent_channels);
        let classes = cfg.data.num_classes;
        let labels = (classes > 0).then(|| Embedding::new(&mut store, "generator.labels", classes + 1, LABEL_DIM, rng));
        let input = shape.dim() + if classes > 0 { LABEL_DIM } else { 0 };
        let net_cfg = &cfg.model.generator;
        let net = match net_cfg.arch {
            Arch::Transformer => {
                let tokens = net_cfg.tokens.unwrap_or(t);
                let w = net_cfg.width;
                GeneratorNet::Transformer {
                    proj: Linear::new(&mut store, "generator.proj", input, tokens * w, rng),
                    body: Transformer::new(&mut store, "generator.body", tokens, w, net_cfg.depth, net_cfg.heads, rng),
                    out: Linear::new(&mut store, "generator.out", w, (t / tokens) * v, rng),
                    tokens,
                }
            }
            _ => {
                let mut dims = vec![input];
                dims.extend(std::iter::repeat_n(net_cfg.width, net_cfg.depth));
                dims.push(t * v);
                GeneratorNet::Mlp(Mlp::new(&mut store, "generator.mlp", &dims, cfg.model.activation, false, rng))
            }
        };
        OneStepGenerator {
            store,
            net,
            labels,
            seq_len: t,
            vocab_size: v,
            shape,
            num_classes: classes,
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

    pub fn is_conditional(&self) -> bool {
        self.labels.is_some()
    }

    /// Index of the null label.
    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    /// Generator evaluations so far, counted per latent row.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn check_labels(&self, labels: Option<&[usize]>, batch: usize) -> Result<()> {
        match (labels, self.is_conditional()) {
            (Some(_), false) => Err(CouplingError::Unsupported(
                "conditional call on an unconditional generator".into(),
            )),
            (Some(l), true) => {
                if l.len() != batch {
                    return Err(CouplingError::Shape("one label per latent required".into()));
                }
                match l.iter().find(|&&y| y > self.num_classes) {
                    Some(&y) => Err(CouplingError::TokenOutOfRange {
                        token: y,
                        vocab: self.num_classes + 1,
                    }),
                    None => Ok(()),
                }
            }
            (None, _) => Ok(()),
        }
    }

    /// Logits `(batch * T) x V` on a tape. A conditional model called without
    /// labels uses the null label.
    pub fn logits_var<'t>(&self, tape: &'t Tape<F>, z: Var<'t, F>, labels: Option<&[usize]>) -> Var<'t, F> {
        let batch = z.rows();
        self.evaluations.fetch_add(batch as u64, Ordering::Relaxed);
        let input = match &self.labels {
            Some(emb) => {
                let idx = labels.map_or_else(|| vec![self.null_label(); batch], <[usize]>::to_vec);
                Var::concat_cols(&[z, emb.forward(tape, &self.store, &idx)])
            }
            None => z,
        };
        let (t, v) = (self.seq_len, self.vocab_size);
        match &self.net {
            GeneratorNet::Mlp(net) => net.forward(tape, &self.store, input).reshape(batch * t, v),
            GeneratorNet::Transformer { proj, body, out, tokens } => {
                let h = proj.forward(tape, &self.store, input).reshape(batch * tokens, body.width);
                out.forward(tape, &self.store, body.forward(tape, &self.store, h, batch))
                    .reshape(batch * t, v)
            }
        }
    }

    /// Logits for a `batch x dim` block of latents.
    pub fn logits_batch(&self, z: &Tensor<F>, labels: Option<&[usize]>) -> Result<Tensor<F>> {
        if z.cols() != self.shape.dim() {
            return Err(CouplingError::Shape(format!(
                "generator expects {} latent dims, got {}",
                self.shape.dim(),
                z.cols()
            )));
        }
        if !z.all_finite() {
            return Err(CouplingError::NonFinite("generator input".into()));
        }
        self.check_labels(labels, z.rows())?;
        let tape = Tape::new();
        Ok(self.logits_var(&tape, tape.constant(z.clone()), labels).value())
    }

    pub fn decoder_logits(&self, z: &GaussianLatent<F>, label: Option<usize>) -> Result<LogitGrid<F>> {
        if z.shape() != self.shape {
            return Err(CouplingError::Shape("latent shape differs from the generator input".into()));
        }
        let labels = label.map(|y| vec![y]);
        LogitGrid::new(self.logits_batch(&z.to_row(), labels.as_deref())?)
    }

    /// `-sum_t log softmax(G(z)_t)[x_t]`.
    pub fn stage_b_loss(&self, z: &GaussianLatent<F>, x: &TokenSequence, label: Option<usize>) -> Result<F> {
        let targets = flatten_tokens(std::slice::from_ref(x), self.seq_len, self.vocab_size)?;
        let logits = self.decoder_logits(z, label)?;
        let tape = Tape::new();
        Ok(sequence_nll_rows(tape.constant(logits.into_tensor()), &targets, 1).item())
    }

    /// Draw `z = z_scale * N(0, I)` for each of `n` samples, decode once, and
    /// sample every position independently at temperature `temperature`.
    pub fn sample_one_step<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        z_scale: f64,
        labels: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<Vec<TokenSequence>> {
        let z = prior_draws::<F, R>(n, self.shape.dim(), z_scale, rng);
        self.sample_from_latents(&z, temperature, labels, rng)
    }

    pub fn sample_from_latents<R: Rng + ?Sized>(
        &self,
        z: &Tensor<F>,
        temperature: f64,
        labels: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<Vec<TokenSequence>> {
        let logits = self.logits_batch(z, labels)?;
        let tokens = sample_rows(&logits, temperature, rng);
        tokens
            .chunks(self.seq_len)
            .map(|c| TokenSequence::new(c.to_vec(), self.vocab_size))
            .collect()
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.add_store(&self.store);
    }
}

pub fn prior_draws<F: Scalar, R: Rng + ?Sized>(n: usize, dim: usize, z_scale: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(n, dim, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        F::of(z_scale * e)
    })
}

/// One categorical draw per row of `softmax(logits / temperature)`; argmax
/// (first maximum) below [`ARGMAX_TEMPERATURE`].
pub fn sample_rows<F: Scalar, R: Rng + ?Sized>(logits: &Tensor<F>, temperature: f64, rng: &mut R) -> Vec<usize> {
    let mut probs = vec![F::zero(); logits.cols()];
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            if temperature < ARGMAX_TEMPERATURE {
                return argmax(row);
            }
            let scaled: Vec<F> = row.iter().map(|&l| l / F::of(temperature)).collect();
            softmax_into(&scaled, &mut probs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p.as_f64();
                if u < acc {
                    return k;
                }
            }
            probs.len() - 1
        })
        .collect()
}

pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Generator plus optimizer, epoch counter and optional parameter average.
#[derive(Debug)]
pub struct StageBState<F: Scalar> {
    pub generator: OneStepGenerator<F>,
    optimizer: AdamW<F>,
    ema: Option<Ema<F>>,
    epoch: usize,
}

impl<F: Scalar> StageBState<F> {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let generator = OneStepGenerator::new(cfg, &mut init_rng(cfg.seed, Phase::StageB));
        let optimizer = AdamW::new(generator.store(), F::of(cfg.stage_b.weight_decay));
        let ema = cfg.stage_b.ema_decay.map(|d| Ema::new(generator.store(), F::of(d)));
        StageBState {
            generator,
            optimizer,
            ema,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// The generator used for evaluation: averaged parameters when enabled.
    pub fn eval_generator(&self) -> OneStepGenerator<F> {
        let mut g = self.generator.clone();
        if let Some(ema) = &self.ema {
            g.store.copy_from(&ema.shadow);
        }
        g
    }

    /// Swap in new weights, resetting the average to them, e.g. after reward
    /// fine-tuning.
    pub fn adopt(&mut self, generator: OneStepGenerator<F>) {
        if let Some(ema) = &mut self.ema {
            ema.shadow.copy_from(generator.store());
        }
        self.generator = generator;
    }

    /// One epoch on the pairs supplied by `source`. With labels and a
    /// conditional model, each label is replaced by the null label with
    /// probability `guidance.cond_dropout_rate`.
    pub fn train_epoch(
        &mut self,
        data: &[TokenSequence],
        labels: Option<&[usize]>,
        stage_a: &StageAState<F>,
        source: &mut PairSource<F>,
        cfg: &ExperimentConfig,
        log: &mut dyn FnMut(&TrainRecord),
    ) -> Result<()> {
        let sc = &cfg.stage_b;
        let pairs = source.for_epoch(data, stage_a, self.epoch)?;
        let mut rng = epoch_rng(cfg.seed, Phase::StageB, self.epoch);
        let spe = steps_per_epoch(pairs.len(), sc.batch_size);
        let labels = if self.generator.is_conditional() { labels } else { None };
        if let Some(l) = labels {
            if l.len() != data.len() {
                return Err(CouplingError::Shape("one label per training sequence required".into()));
            }
        }
        for idx in minibatches(pairs.len(), sc.batch_size, &mut rng) {
            let z = pairs.latents().select_rows(&idx);
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| pairs.sequences()[i].clone()).collect();
            let targets = flatten_tokens(&batch, self.generator.seq_len, self.generator.vocab_size)?;
            let y: Option<Vec<usize>> = labels.map(|l| {
                idx.iter()
                    .map(|&i| {
                        if rng.random::<f64>() < cfg.guidance.cond_dropout_rate {
                            self.generator.null_label()
                        } else {
                            l[i]
                        }
                    })
                    .collect()
            });
            let tape = Tape::new();
            let logits = self.generator.logits_var(&tape, tape.constant(z), y.as_deref());
            let loss = sequence_nll_rows(logits, &targets, idx.len()).mean();
            let total = loss.item();
            if !total.is_finite() {
                return Err(CouplingError::NonFinite(format!(
                    "stage B loss diverged at epoch {} step {}",
                    self.epoch, self.optimizer.step
                )));
            }
            let mut grads = tape.backward(loss).for_store(self.generator.store());
            if let Some(c) = sc.grad_clip {
                clip_grad_norm(&mut grads, F::of(c));
            }
            let lr = learning_rate(sc.lr_schedule, sc.learning_rate, sc.warmup_epochs, sc.epochs, spe, self.optimizer.step);
            self.optimizer.step(&mut self.generator.store, &grads, F::of(lr));
            if let Some(ema) = &mut self.ema {
                ema.update(self.generator.store());
            }
            log(&TrainRecord {
                stage: Phase::StageB,
                epoch: self.epoch,
                step: self.optimizer.step,
                total: total.as_f64(),
                rec: None,
                kl: None,
                flow: None,
                lr,
            });
        }
        self.generator.reset_evaluations();
        self.epoch += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "stage_b");
        ck.set_meta("config", cfg.to_toml_string());
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("digest", self.generator.digest());
        ck.set_meta("conditional", self.generator.is_conditional());
        self.generator.to_checkpoint(&mut ck);
        ck.add_optimizer("stage_b.optim", &self.optimizer, self.generator.store());
        if let Some(ema) = &self.ema {
            for (name, t) in ema.shadow.iter() {
                ck.insert(format!("ema.{name}"), t);
            }
        }
        ck
    }

    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.meta_value("kind")?;
        if kind != "stage_b" {
            return Err(CouplingError::Prerequisite(format!("expected a stage B checkpoint, found `{kind}`")));
        }
        let mut state = StageBState::new(cfg);
        ck.restore_store(&mut state.generator.store)?;
        ck.restore_optimizer("stage_b.optim", &mut state.optimizer, state.generator.store())?;
        if let Some(ema) = &mut state.ema {
            let names: Vec<String> = ema.shadow.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let t = ck
                    .array(&format!("ema.{name}"))
                    .ok_or_else(|| CouplingError::Prerequisite(format!("checkpoint lacks `ema.{name}`")))?;
                ema.shadow.assign(&name, t.cast())?;
            }
        }
        state.epoch = ck.meta_value("epoch")?;
        Ok(state)
    }
}

/// Pair stream for decoder training.
pub fn pair_source<F: Scalar>(cfg: &ExperimentConfig) -> PairSource<F> {
    PairSource::new(cfg.stage_a.pair_mode, cfg.seed)
}

/// Train the decoder on pairs from a frozen stage A for `cfg.stage_b.epochs` epochs.
pub fn train_stage_b<F: Scalar>(
    data: &[TokenSequence],
    labels: Option<&[usize]>,
    stage_a: &StageAState<F>,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<StageBState<F>> {
    let mut state = StageBState::new(cfg);
    resume_stage_b(&mut state, data, labels, stage_a, cfg, log)?;
    Ok(state)
}

pub fn resume_stage_b<F: Scalar>(
    state: &mut StageBState<F>,
    data: &[TokenSequence],
    labels: Option<&[usize]>,
    stage_a: &StageAState<F>,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<()> {
    if !stage_a.is_frozen() {
        return Err(CouplingError::NotFrozen("stage B needs a frozen stage A".into()));
    }
    if data.is_empty() {
        return Err(CouplingError::InvalidArgument("empty training set".into()));
    }
    let mut source = pair_source(cfg);
    while state.epoch < cfg.stage_b.epochs {
        state.train_epoch(data, labels, stage_a, &mut source, cfg, log)?;
    }
    Ok(())
}
