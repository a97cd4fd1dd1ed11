//! Plain masked-diffusion baseline: the denoiser and sampler of [`crate::mdm`]
//! with the latent input removed.

use crate::config::ExperimentConfig;
use crate::error::{CouplingError, Result};
use crate::mdm::{MaskedDenoiser, MdmState};
use crate::scalar::Scalar;
use crate::training::TrainRecord;
use crate::types::TokenSequence;

pub type PlainMaskedDenoiser<F> = MaskedDenoiser<F>;

pub fn train_baseline<F: Scalar>(
    data: &[TokenSequence],
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<MdmState<F>> {
    let mut state = MdmState::new(cfg, false);
    resume_baseline(&mut state, data, cfg, log)?;
    Ok(state)
}

pub fn resume_baseline<F: Scalar>(
    state: &mut MdmState<F>,
    data: &[TokenSequence],
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&TrainRecord),
) -> Result<()> {
    if state.denoiser.latent.is_some() {
        return Err(CouplingError::InvalidArgument("baseline training needs the plain denoiser".into()));
    }
    if data.is_empty() {
        return Err(CouplingError::InvalidArgument("empty training set".into()));
    }
    while state.epoch() < cfg.mdm.epochs {
        state.train_epoch(data, None, cfg, log)?;
    }
    Ok(())
}
