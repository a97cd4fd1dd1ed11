//! Pieces shared by every training loop: seeded per-epoch random streams,
//! minibatch order, learning-rate lookup and the line-delimited log record.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LrSchedule;
use crate::optim::CosineSchedule;

pub type SeededRng = ChaCha8Rng;

/// Training phase tag, also used to separate random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    StageA,
    StageB,
    Mdm,
    Baseline,
    RewardFt,
    Sampling,
}

impl Phase {
    fn id(self) -> u64 {
        match self {
            Phase::StageA => 1,
            Phase::StageB => 2,
            Phase::Mdm => 3,
            Phase::Baseline => 4,
            Phase::RewardFt => 5,
            Phase::Sampling => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::StageA => "a",
            Phase::StageB => "b",
            Phase::Mdm => "mdm",
            Phase::Baseline => "baseline",
            Phase::RewardFt => "reward_ft",
            Phase::Sampling => "sampling",
        }
    }
}

const INIT_STREAM: u64 = u32::MAX as u64;

/// Stream for one epoch of one phase. Depends only on `(seed, phase, epoch)`, so
/// a resumed run replays exactly the draws an uninterrupted run would make.
pub fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase.id() << 32) | (epoch as u64 & 0xffff_ffff));
    rng
}

/// Stream for parameter initialization of a phase.
pub fn init_rng(seed: u64, phase: Phase) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase.id() << 32) | INIT_STREAM);
    rng
}

/// Shuffled minibatches of `0..n`; the last batch may be short.
pub fn minibatches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Learning rate at a global optimizer step.
pub fn learning_rate(
    schedule: LrSchedule,
    base: f64,
    warmup_epochs: usize,
    epochs: usize,
    steps_per_epoch: usize,
    step: u64,
) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => CosineSchedule {
            base_lr: base,
            warmup_steps: (warmup_epochs * steps_per_epoch) as u64,
            total_steps: (epochs * steps_per_epoch) as u64,
        }
        .lr_at(step),
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Phase,
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow: Option<f64>,
    pub lr: f64,
}
