//! Stage A: joint training of encoder, reconstruction head and flow, freezing,
//! and construction of the `(z, x)` pairs that supervise the one-step decoder.

use std::borrow::Cow;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::autoencoder::{kl_rows, sequence_nll_rows, Autoencoder};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, PairMode};
use crate::error::{CouplingError, Result};
use crate::flow::{flow_nll_rows, CouplingFlow};
use crate::nn::ParamStore;
use crate::optim::{clip_grad_norm, AdamW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{epoch_rng, init_rng, learning_rate, minibatches, steps_per_epoch, Phase, TrainRecord};
use crate::types::{flatten_tokens, PairProvenance, PairedLatentDataset, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub flow: f64,
}

/// Batch means of the three per-example terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<F> {
    pub total: F,
    pub rec: F,
    pub kl: F,
    pub flow: F,
}

#[derive(Clone, Debug)]
pub struct StageAState<F: Scalar> {
    store: ParamStore<F>,
    pub autoencoder: Autoencoder,
    pub flow: CouplingFlow,
    optimizer: AdamW<F>,
    epoch: usize,
    frozen: bool,
    pub weights: LossWeights,
}

struct LossVars<'t, F: Scalar> {
    total: Var<'t, F>,
    rec: Var<'t, F>,
    kl: Var<'t, F>,
    flow: Var<'t, F>,
}

impl<F: Scalar> StageAState<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let autoencoder = Autoencoder::new(&mut store, cfg, rng);
        let flow = CouplingFlow::new(&mut store, autoencoder.shape, &cfg.flow, cfg.model.activation, rng);
        let optimizer = AdamW::new(&store, F::of(cfg.stage_a.weight_decay));
        StageAState {
            store,
            autoencoder,
            flow,
            optimizer,
            epoch: 0,
            frozen: false,
            weights: LossWeights {
                rec: cfg.stage_a.lambda_rec,
                kl: cfg.stage_a.lambda_kl,
                flow: cfg.stage_a.lambda_flow,
            },
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    /// Mutable parameters; refused once the state is frozen.
    pub fn store_mut(&mut self) -> Result<&mut ParamStore<F>> {
        if self.frozen {
            return Err(CouplingError::InvalidArgument("stage A state is frozen".into()));
        }
        Ok(&mut self.store)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// SHA-256 over encoder, head and flow parameters.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn noise_std(&self) -> F {
        F::of(self.autoencoder.noise_std)
    }

    fn loss_vars<'t>(
        &self,
        tape: &'t Tape<F>,
        tokens: &[usize],
        batch: usize,
        noise: &Tensor<F>,
        flow_weight: f64,
    ) -> LossVars<'t, F> {
        let ae = &self.autoencoder;
        let mean = ae.mean_var(tape, &self.store, tokens, batch);
        let u = mean + tape.constant(noise.map(|e| e * self.noise_std()));
        let rec = sequence_nll_rows(ae.head_logits(tape, &self.store, u, batch), tokens, batch).mean();
        let kl = kl_rows(mean, self.noise_std()).mean();
        let (z, logdet) = self.flow.forward_var(tape, &self.store, u);
        let flow = flow_nll_rows(z, logdet).mean();
        let total = rec.scale(F::of(self.weights.rec))
            + kl.scale(F::of(self.weights.kl))
            + flow.scale(F::of(flow_weight));
        LossVars { total, rec, kl, flow }
    }

    /// The Stage A objective on one batch, with fresh encoder noise from `rng`.
    pub fn stage_a_loss<R: Rng + ?Sized>(&self, batch: &[TokenSequence], rng: &mut R) -> Result<LossComponents<F>> {
        let noise = Tensor::randn(batch.len(), self.autoencoder.shape.dim(), F::one(), rng);
        self.stage_a_loss_with_noise(batch, &noise)
    }

    pub fn stage_a_loss_with_noise(&self, batch: &[TokenSequence], noise: &Tensor<F>) -> Result<LossComponents<F>> {
        Ok(self.stage_a_loss_and_grads(batch, noise)?.0)
    }

    /// The objective and its gradient for every parameter in [`Self::store`].
    pub fn stage_a_loss_and_grads(
        &self,
        batch: &[TokenSequence],
        noise: &Tensor<F>,
    ) -> Result<(LossComponents<F>, Vec<Option<Tensor<F>>>)> {
        if batch.is_empty() {
            return Err(CouplingError::InvalidArgument("empty batch".into()));
        }
        if noise.shape() != (batch.len(), self.autoencoder.shape.dim()) {
            return Err(CouplingError::Shape("noise does not match batch and latent layout".into()));
        }
        let tokens = flatten_tokens(batch, self.autoencoder.seq_len, self.autoencoder.vocab_size)?;
        let tape = Tape::new();
        let v = self.loss_vars(&tape, &tokens, batch.len(), noise, self.weights.flow);
        let parts = LossComponents {
            total: v.total.item(),
            rec: v.rec.item(),
            kl: v.kl.item(),
            flow: v.flow.item(),
        };
        Ok((parts, tape.backward(v.total).for_store(&self.store)))
    }

    fn flow_weight(&self, cfg: &ExperimentConfig) -> f64 {
        match &cfg.stage_a.flow_anneal {
            Some(a) if a.epochs > 0 => {
                let frac = (self.epoch as f64 / a.epochs as f64).min(1.0);
                a.start + (self.weights.flow - a.start) * frac
            }
            _ => self.weights.flow,
        }
    }

    /// One pass over `data`. Draws come from the `(seed, epoch)` stream only.
    pub fn train_epoch(
        &mut self,
        data: &[TokenSequence],
        cfg: &ExperimentConfig,
        log: &mut dyn FnMut(&TrainRecord),
    ) -> Result<()> {
        if self.frozen {
            return Err(CouplingError::InvalidArgument("stage A state is frozen".into()));
        }
        let sc = &cfg.stage_a;
        let mut rng = epoch_rng(cfg.seed, Phase::StageA, self.epoch);
        let spe = steps_per_epoch(data.len(), sc.batch_size);
        let flow_weight = self.flow_weight(cfg);
        for idx in minibatches(data.len(), sc.batch_size, &mut rng) {
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
            let tokens = flatten_tokens(&batch, self.autoencoder.seq_len, self.autoencoder.vocab_size)?;
            let noise = Tensor::randn(batch.len(), self.autoencoder.shape.dim(), F::one(), &mut rng);
            let tape = Tape::new();
            let v = self.loss_vars(&tape, &tokens, batch.len(), &noise, flow_weight);
            let total = v.total.item();
            if !total.is_finite() {
                return Err(CouplingError::NonFinite(format!(
                    "stage A loss diverged at epoch {} step {}",
                    self.epoch, self.optimizer.step
                )));
            }
            let mut grads = tape.backward(v.total).for_store(&self.store);
            if let Some(c) = sc.grad_clip {
                clip_grad_norm(&mut grads, F::of(c));
            }
            let lr = learning_rate(
                sc.lr_schedule,
                sc.learning_rate,
                sc.warmup_epochs,
                sc.epochs,
                spe,
                self.optimizer.step,
            );
            self.optimizer.step(&mut self.store, &grads, F::of(lr));
            log(&TrainRecord {
                stage: Phase::StageA,
                epoch: self.epoch,
                step: self.optimizer.step,
                total: total.as_f64(),
                rec: Some(v.rec.item().as_f64()),
                kl: Some(v.kl.item().as_f64()),
                flow: Some(v.flow.item().as_f64()),
                lr,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// `z = flow(mean(x) + sigma * noise)` for every row, in chunks.
    pub fn latents_for(&self, data: &[TokenSequence], noise: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.autoencoder.shape.dim();
        if noise.shape() != (data.len(), d) {
            return Err(CouplingError::Shape("noise does not match data and latent layout".into()));
        }
        let mut out = Vec::with_capacity(data.len() * d);
        for start in (0..data.len()).step_by(512) {
            let end = (start + 512).min(data.len());
            let chunk = &data[start..end];
            let tokens = flatten_tokens(chunk, self.autoencoder.seq_len, self.autoencoder.vocab_size)?;
            let tape = Tape::new();
            let mean = self.autoencoder.mean_var(&tape, &self.store, &tokens, chunk.len());
            let u = mean + tape.constant(noise.slice_rows(start, end).map(|e| e * self.noise_std()));
            let (z, _) = self.flow.forward_var(&tape, &self.store, u);
            let z = z.value();
            if !z.all_finite() {
                return Err(CouplingError::NonFinite("latent encoding".into()));
            }
            out.extend_from_slice(z.data());
        }
        Tensor::from_vec(data.len(), d, out)
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "stage_a");
        ck.set_meta("config", cfg.to_toml_string());
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("frozen", self.frozen);
        ck.set_meta("noise_std", self.autoencoder.noise_std);
        ck.set_meta("latent_shape", self.autoencoder.shape);
        ck.set_meta("digest", self.digest());
        ck.add_store(&self.store);
        ck.add_optimizer("stage_a.optim", &self.optimizer, &self.store);
        for (name, idx) in self.flow.descriptors() {
            ck.insert_indices(name, idx);
        }
        ck
    }

    /// Rebuild from a checkpoint written by [`StageAState::to_checkpoint`].
    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.meta_value("kind")?;
        if kind != "stage_a" {
            return Err(CouplingError::Prerequisite(format!("expected a stage A checkpoint, found `{kind}`")));
        }
        let mut state = StageAState::new(cfg, &mut init_rng(cfg.seed, Phase::StageA));
        ck.restore_store(&mut state.store)?;
        ck.restore_optimizer("stage_a.optim", &mut state.optimizer, &state.store)?;
        for (name, idx) in state.flow.descriptors() {
            if ck.indices(&name) != Some(idx.as_slice()) {
                return Err(CouplingError::Format {
                    path: "checkpoint".into(),
                    message: format!("flow descriptor `{name}` does not match the configured flow"),
                });
            }
        }
        state.epoch = ck.meta_value("epoch")?;
        state.frozen = ck.meta_value("frozen")?;
        Ok(state)
    }
}

/// Train from scratch for `cfg.stage_a.epochs` epochs and freeze.
pub fn train_stage_a<F: Scalar>(
    data: &[TokenSequence],
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<StageAState<F>> {
    let mut state = StageAState::new(cfg, &mut init_rng(cfg.seed, Phase::StageA));
    resume_stage_a(&mut state, data, cfg, log)?;
    Ok(state)
}

/// Continue training from the state's epoch counter, then freeze.
pub fn resume_stage_a<F: Scalar>(
    state: &mut StageAState<F>,
    data: &[TokenSequence],
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<()> {
    if data.is_empty() {
        return Err(CouplingError::InvalidArgument("empty training set".into()));
    }
    while state.epoch < cfg.stage_a.epochs {
        state.train_epoch(data, cfg, log)?;
    }
    state.freeze();
    Ok(())
}

/// Encode every sequence with one fresh noise draw each.
pub fn materialize_pairs<F: Scalar, R: Rng + ?Sized>(
    data: &[TokenSequence],
    state: &StageAState<F>,
    rng: &mut R,
    provenance: PairProvenance,
) -> Result<PairedLatentDataset<F>> {
    if !state.is_frozen() {
        return Err(CouplingError::NotFrozen("pairs can only be built from a frozen stage A".into()));
    }
    let noise = Tensor::randn(data.len(), state.autoencoder.shape.dim(), F::one(), rng);
    let z = state.latents_for(data, &noise)?;
    PairedLatentDataset::new(z, data.to_vec(), state.autoencoder.shape, provenance)
}

/// Per-epoch view of the supervision pairs: one fixed draw, or a redraw per epoch.
pub struct PairSource<F: Scalar> {
    mode: PairMode,
    seed: u64,
    fixed: Option<PairedLatentDataset<F>>,
}

impl<F: Scalar> PairSource<F> {
    pub fn new(mode: PairMode, seed: u64) -> Self {
        PairSource { mode, seed, fixed: None }
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn for_epoch(
        &mut self,
        data: &[TokenSequence],
        state: &StageAState<F>,
        epoch: usize,
    ) -> Result<Cow<'_, PairedLatentDataset<F>>> {
        match self.mode {
            PairMode::Frozen => {
                if self.fixed.is_none() {
                    let mut rng = epoch_rng(self.seed, Phase::StageB, usize::MAX >> 32);
                    self.fixed = Some(materialize_pairs(data, state, &mut rng, PairProvenance::Frozen)?);
                }
                Ok(Cow::Borrowed(self.fixed.as_ref().expect("just built")))
            }
            PairMode::Resampled => {
                // A dedicated stream per epoch keeps the draws independent of batch order.
                let mut rng = epoch_rng(self.seed ^ 0x5eed_0fa1, Phase::StageB, epoch);
                let provenance = PairProvenance::Resampled { epoch: epoch as u64 };
                Ok(Cow::Owned(materialize_pairs(data, state, &mut rng, provenance)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> (ExperimentConfig, Vec<TokenSequence>) {
        let mut cfg = ExperimentConfig::profile("toy-pair").unwrap();
        cfg.stage_a.epochs = 2;
        cfg.stage_a.batch_size = 16;
        let data = (0..n)
            .map(|i| TokenSequence::new(vec![i % 2, i % 2], 2).unwrap())
            .collect();
        (cfg, data)
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let (cfg, data) = toy(8);
        let mut state = StageAState::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        state.weights = LossWeights { rec: 0.0, kl: 0.0, flow: 0.0 };
        let l = state.stage_a_loss(&data, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.rec > 0.0 && l.flow > 0.0);
    }

    #[test]
    fn identity_flow_recomposes_vae_objective() {
        let (cfg, data) = toy(6);
        let mut state = StageAState::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        state.weights.flow = 0.0;
        let noise = Tensor::randn(6, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let l = state.stage_a_loss_with_noise(&data, &noise).unwrap();

        let ae = &state.autoencoder;
        let (mut rec, mut kl) = (0.0, 0.0);
        for (i, x) in data.iter().enumerate() {
            let out = ae.encode(state.store(), x, noise.row(i)).unwrap();
            rec += crate::autoencoder::reconstruction_loss(&ae.reconstruct(state.store(), &out.sampled_u).unwrap(), x)
                .unwrap();
            kl += crate::autoencoder::kl_loss(&out.mean, 0.1).unwrap();
        }
        let expect = rec / 6.0 + cfg.stage_a.lambda_kl * kl / 6.0;
        assert_relative_eq!(l.total, expect, epsilon = 1e-10);
        assert_relative_eq!(l.rec, rec / 6.0, epsilon = 1e-10);
    }

    #[test]
    fn training_is_deterministic_and_composes() {
        let (cfg, data) = toy(64);
        let mut a = Vec::new();
        let sa = train_stage_a::<f64>(&data, &cfg, &mut |r| a.push(r.clone())).unwrap();
        let mut b = Vec::new();
        let sb = train_stage_a::<f64>(&data, &cfg, &mut |r| b.push(r.clone())).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.digest(), sb.digest());
        assert!(sa.is_frozen());
        for r in &a {
            let sum = cfg.stage_a.lambda_rec * r.rec.unwrap()
                + cfg.stage_a.lambda_kl * r.kl.unwrap()
                + cfg.stage_a.lambda_flow * r.flow.unwrap();
            assert!((sum - r.total).abs() <= 1e-12 * r.total.abs().max(1.0));
        }
        assert_eq!(a.len(), 2 * 4);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, data) = toy(32);
        let mut full = Vec::new();
        let whole = train_stage_a::<f64>(&data, &cfg, &mut |r| full.push(r.clone())).unwrap();

        let mut first = Vec::new();
        let mut part = StageAState::<f64>::new(&cfg, &mut init_rng(cfg.seed, Phase::StageA));
        part.train_epoch(&data, &cfg, &mut |r| first.push(r.clone())).unwrap();
        let restored = StageAState::<f64>::from_checkpoint(
            &cfg,
            &Checkpoint::from_bytes(&part.to_checkpoint(&cfg).to_bytes(), "mem").unwrap(),
        )
        .unwrap();
        let mut restored = restored;
        resume_stage_a(&mut restored, &data, &cfg, &mut |r| first.push(r.clone())).unwrap();
        assert_eq!(first, full);
        assert_eq!(restored.digest(), whole.digest());
    }

    #[test]
    fn pairs_require_freezing_and_match_construction() {
        let (cfg, data) = toy(10);
        let mut state = StageAState::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let err = materialize_pairs(&data, &state, &mut ChaCha8Rng::seed_from_u64(0), PairProvenance::Frozen);
        assert!(matches!(err, Err(CouplingError::NotFrozen(_))));
        state.freeze();
        assert!(state.train_epoch(&data, &cfg, &mut |_| {}).is_err());

        let p1 = materialize_pairs(&data, &state, &mut ChaCha8Rng::seed_from_u64(4), PairProvenance::Frozen).unwrap();
        let p2 = materialize_pairs(&data, &state, &mut ChaCha8Rng::seed_from_u64(4), PairProvenance::Frozen).unwrap();
        assert_eq!(p1.latents(), p2.latents());

        let noise = Tensor::<f64>::randn(10, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        for (i, x) in data.iter().enumerate() {
            let u = state.autoencoder.encode(state.store(), x, noise.row(i)).unwrap().sampled_u;
            let (z, _) = state.flow.flow_forward(state.store(), &u).unwrap();
            assert_eq!(z.values(), p1.latents().row(i));
        }

        let mut fixed = PairSource::new(PairMode::Frozen, 0);
        let e0 = fixed.for_epoch(&data, &state, 0).unwrap().latents().clone();
        let e1 = fixed.for_epoch(&data, &state, 1).unwrap().latents().clone();
        assert_eq!(e0, e1);
        let mut fresh = PairSource::new(PairMode::Resampled, 0);
        let r0 = fresh.for_epoch(&data, &state, 0).unwrap();
        assert_eq!(r0.provenance(), PairProvenance::Resampled { epoch: 0 });
        let r0 = r0.latents().clone();
        let r1 = fresh.for_epoch(&data, &state, 1).unwrap().latents().clone();
        assert_ne!(r0, r1);
    }

    #[test]
    fn divergence_guard_trips() {
        let (mut cfg, data) = toy(16);
        cfg.stage_a.learning_rate = 1e300;
        cfg.stage_a.lr_schedule = crate::config::LrSchedule::Constant;
        cfg.stage_a.epochs = 50;
        let err = train_stage_a::<f64>(&data, &cfg, &mut |_| {}).unwrap_err();
        assert!(matches!(err, CouplingError::NonFinite(_)), "{err}");
    }
}
