use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use coupling_core::data::load_dataset;
use coupling_core::mdm::{pair_source as mdm_pairs, MdmState};
use coupling_core::stage_a::StageAState;
use coupling_core::stage_b::{pair_source as decoder_pairs, StageBState};
use coupling_core::training::{init_rng, Phase, TrainRecord};
use coupling_core::{Checkpoint, CouplingError, ExperimentConfig, Scalar};

use super::load_config;
use crate::manifest::{relative, CheckpointEntry, RunManifest};
use crate::{Context, Precision, Stage, TrainArgs};

pub fn train(args: &TrainArgs, ctx: &Context) -> anyhow::Result<()> {
    match ctx.precision {
        Precision::F32 => train_as::<f32>(args, ctx),
        Precision::F64 => train_as::<f64>(args, ctx),
    }
}

/// JSON-lines training log. On resume, lines from epochs that were not
/// checkpointed are dropped so the log matches an uninterrupted run.
struct TrainLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl TrainLog {
    fn open(path: &Path, keep_before_epoch: Option<usize>) -> anyhow::Result<Self> {
        let kept: Vec<String> = match keep_before_epoch {
            Some(epoch) if path.exists() => std::fs::read_to_string(path)?
                .lines()
                .filter(|line| {
                    serde_json::from_str::<TrainRecord>(line).map(|r| r.epoch < epoch).unwrap_or(false)
                })
                .map(str::to_string)
                .collect(),
            _ => Vec::new(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        for line in kept {
            writeln!(out, "{line}")?;
        }
        Ok(TrainLog { out, error: None })
    }

    fn record(&mut self, r: &TrainRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    fn flush(&mut self) -> anyhow::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn stage_a_from<F: Scalar>(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<StageAState<F>> {
    let ck = Checkpoint::load(path)?;
    let state = StageAState::from_checkpoint(cfg, &ck)?;
    if !state.is_frozen() {
        return Err(CouplingError::NotFrozen(format!(
            "{} has not finished training; run `train a` to completion first",
            path.display()
        ))
        .into());
    }
    Ok(state)
}

fn train_as<F: Scalar>(args: &TrainArgs, ctx: &Context) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.config)?;
    if args.baseline && args.stage != Stage::Mdm {
        return Err(CouplingError::config("--baseline", "only applies to `train mdm`").into());
    }
    std::fs::create_dir_all(&args.out)?;
    let (name, file) = match (args.stage, args.baseline) {
        (Stage::A, _) => ("a", "stage_a.ckpt"),
        (Stage::B, _) => ("b", "stage_b.ckpt"),
        (Stage::Mdm, false) => ("mdm", "mdm.ckpt"),
        (Stage::Mdm, true) => ("baseline", "baseline.ckpt"),
    };
    // Prerequisites are checked before the (possibly slow) data load.
    let stage_a_path: PathBuf = args.stage_a.clone().unwrap_or_else(|| args.out.join("stage_a.ckpt"));
    let needs_stage_a = matches!((args.stage, args.baseline), (Stage::B, _) | (Stage::Mdm, false));
    let stage_a = if needs_stage_a {
        Some(stage_a_from::<F>(&stage_a_path, &cfg)?)
    } else {
        None
    };
    let data = load_dataset(&cfg, ctx.data_dir.as_deref())?;
    let items = &data.items;

    let ck_path = args.out.join(file);
    let existing = if ck_path.exists() {
        Some(Checkpoint::load(&ck_path)?)
    } else {
        None
    };
    let log_path = args.out.join(format!("train_{name}.jsonl"));
    let resumed_epoch = existing
        .as_ref()
        .map(|ck| ck.meta_value::<usize>("epoch"))
        .transpose()?;
    let mut log = TrainLog::open(&log_path, resumed_epoch)?;
    let save = |ck: Checkpoint| -> anyhow::Result<()> { Ok(ck.save(&ck_path)?) };
    // Epoch at which this invocation stops.
    let budget = |from: usize, total: usize| args.stop_after.map_or(total, |n| total.min(from + n));

    let (epoch, digest) = match args.stage {
        Stage::A => {
            let mut state = match &existing {
                Some(ck) => StageAState::<F>::from_checkpoint(&cfg, ck)?,
                None => StageAState::new(&cfg, &mut init_rng(cfg.seed, Phase::StageA)),
            };
            if state.is_frozen() && state.epoch() < cfg.stage_a.epochs {
                return Err(CouplingError::config(
                    "stage_a.epochs",
                    format!("{} is already frozen at epoch {}", ck_path.display(), state.epoch()),
                )
                .into());
            }
            let until = budget(state.epoch(), cfg.stage_a.epochs);
            while state.epoch() < until {
                state.train_epoch(items, &cfg, &mut |r| log.record(r))?;
                log.flush()?;
                save(state.to_checkpoint(&cfg))?;
            }
            if state.epoch() >= cfg.stage_a.epochs && !state.is_frozen() {
                state.freeze();
                save(state.to_checkpoint(&cfg))?;
            }
            (state.epoch(), state.digest())
        }
        Stage::B => {
            let stage_a = stage_a.as_ref().expect("stage A loaded above");
            let mut state = match &existing {
                Some(ck) => StageBState::<F>::from_checkpoint(&cfg, ck)?,
                None => StageBState::new(&cfg),
            };
            let mut source = decoder_pairs(&cfg);
            let labels = data.labels.as_deref();
            let until = budget(state.epoch(), cfg.stage_b.epochs);
            while state.epoch() < until {
                state.train_epoch(items, labels, stage_a, &mut source, &cfg, &mut |r| log.record(r))?;
                log.flush()?;
                save(state.to_checkpoint(&cfg))?;
            }
            (state.epoch(), state.generator.digest())
        }
        Stage::Mdm => {
            let mut state = match &existing {
                Some(ck) => MdmState::<F>::from_checkpoint(&cfg, ck)?,
                None => MdmState::new(&cfg, !args.baseline),
            };
            if state.denoiser.latent.is_some() == args.baseline {
                return Err(CouplingError::config(
                    "--baseline",
                    format!("{} holds the other denoiser variant", ck_path.display()),
                )
                .into());
            }
            let mut source = mdm_pairs::<F>(&cfg);
            let until = budget(state.epoch(), cfg.mdm.epochs);
            while state.epoch() < until {
                match &stage_a {
                    Some(sa) => {
                        let pairs = source.for_epoch(items, sa, state.epoch())?.into_owned();
                        state.train_epoch(pairs.sequences(), Some(pairs.latents()), &cfg, &mut |r| log.record(r))?;
                    }
                    None => state.train_epoch(items, None, &cfg, &mut |r| log.record(r))?,
                }
                log.flush()?;
                save(state.to_checkpoint(&cfg))?;
            }
            (state.epoch(), state.denoiser.digest())
        }
    };

    let mut manifest = RunManifest::open(&args.out)?;
    manifest.set_config(&cfg, cfg.seed, ctx.deterministic);
    manifest.add_checkpoint(CheckpointEntry {
        path: relative(&args.out, &ck_path),
        kind: name.to_string(),
        epoch,
        digest: digest.clone(),
    });
    manifest.add_artifact(relative(&args.out, &log_path));
    manifest.record_command(&format!("train {name}"), super::seconds_since(start));
    manifest.save(&args.out)?;
    eprintln!("train {name}: epoch {epoch}, parameters {digest}");
    Ok(())
}
