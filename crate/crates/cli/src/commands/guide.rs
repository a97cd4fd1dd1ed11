use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use coupling_core::data::load_dataset;
use coupling_core::guidance::{
    cfg_logits_batch, latent_guidance, reward_finetune, LinearReward, RelaxSpec, RewardModel, TokenClassifier,
};
use coupling_core::stage_b::{prior_draws, sample_rows, OneStepGenerator, StageBState};
use coupling_core::training::{init_rng, Phase};
use coupling_core::{Checkpoint, CouplingError, ExperimentConfig, Scalar, Tensor, TokenSequence};

use super::{checkpoint_config, checkpoint_kind, chunks, label_plan, require_positive};
use crate::artifacts::write_samples;
use crate::manifest::{relative, CheckpointEntry, RunManifest};
use crate::{Context, GuideArgs, GuideMode, Precision};

const CLASSIFIER_WIDTH: usize = 128;
const CLASSIFIER_EPOCHS: usize = 3;
const CLASSIFIER_MAX_ITEMS: usize = 10_000;
const BATCH: usize = 256;

pub fn guide(args: &GuideArgs, ctx: &Context) -> anyhow::Result<()> {
    match ctx.precision {
        Precision::F32 => guide_as::<f32>(args, ctx),
        Precision::F64 => guide_as::<f64>(args, ctx),
    }
}

/// `classifier`, or `token=<v>` for the expected count of token `v`.
fn build_reward<F: Scalar>(
    spec: Option<&str>,
    cfg: &ExperimentConfig,
    generator: &OneStepGenerator<F>,
    ctx: &Context,
) -> anyhow::Result<Box<dyn RewardModel<F>>> {
    let default = if generator.is_conditional() {
        "classifier".to_string()
    } else {
        format!("token={}", generator.vocab_size - 1)
    };
    let spec = spec.map(str::to_string).unwrap_or(default);
    let (t, v) = (generator.seq_len, generator.vocab_size);
    if spec == "classifier" {
        if !generator.is_conditional() {
            return Err(CouplingError::config("--reward", "the classifier reward needs a conditional generator").into());
        }
        let data = load_dataset(cfg, ctx.data_dir.as_deref())?;
        let labels = data
            .labels
            .ok_or_else(|| CouplingError::config("--reward", "the classifier reward needs a labelled dataset"))?;
        let keep = data.items.len().min(CLASSIFIER_MAX_ITEMS);
        let mut clf = TokenClassifier::new(t, v, generator.num_classes, CLASSIFIER_WIDTH, &mut init_rng(cfg.seed, Phase::RewardFt));
        let loss = clf.fit(&data.items[..keep], &labels[..keep], CLASSIFIER_EPOCHS, cfg.seed)?;
        eprintln!("reward classifier: final loss {loss:.4} on {keep} examples");
        return Ok(Box::new(clf));
    }
    let token = spec
        .strip_prefix("token=")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&tok| tok < v)
        .ok_or_else(|| CouplingError::config("--reward", format!("expected `classifier` or `token=<v>` with v < {v}")))?;
    let weights = Tensor::from_fn(1, t * v, |_, c| if c % v == token { F::one() } else { F::zero() });
    Ok(Box::new(LinearReward { weights }))
}

fn guide_as<F: Scalar>(args: &GuideArgs, ctx: &Context) -> anyhow::Result<()> {
    let start = Instant::now();
    require_positive("--n", args.n)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let kind = checkpoint_kind(&ck)?;
    if kind != "stage_b" {
        return Err(CouplingError::config("--checkpoint", format!("guidance needs a stage B checkpoint, got `{kind}`")).into());
    }
    let mut state = StageBState::<F>::from_checkpoint(&cfg, &ck)?;
    let generator = state.eval_generator();
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut rng = init_rng(seed, Phase::Sampling);
    let labels = label_plan(&generator, args.label, args.n)?;
    let relax = RelaxSpec {
        mode: args.relax.map(Into::into).unwrap_or(cfg.guidance.relaxation),
        temperature: args.relax_temperature.unwrap_or(cfg.guidance.relaxation_temperature),
    };
    let dim = generator.shape.dim();
    let z_scale = cfg.stage_b.z_scale;
    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("guidance.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut manifest = RunManifest::open(&args.out)?;
    manifest.set_config(&cfg, seed, ctx.deterministic);
    let mut xs: Vec<TokenSequence> = Vec::with_capacity(args.n);

    let (label, nfe) = match args.mode {
        GuideMode::Cfg => {
            if !generator.is_conditional() {
                return Err(CouplingError::config("--mode", "classifier-free guidance needs a conditional generator").into());
            }
            let scale = args.scale.unwrap_or(cfg.guidance.cfg_scale);
            let labels = labels.expect("conditional generator has labels");
            generator.reset_evaluations();
            for range in chunks(args.n, BATCH) {
                let z = prior_draws::<F, _>(range.len(), dim, z_scale, &mut rng);
                let logits = cfg_logits_batch(&generator, &z, &labels[range], scale)?;
                let tokens = sample_rows(&logits, args.temperature, &mut rng);
                for row in tokens.chunks(generator.seq_len) {
                    xs.push(TokenSequence::new(row.to_vec(), generator.vocab_size)?);
                }
            }
            writeln!(log, "{}", serde_json::json!({ "mode": "cfg", "scale": scale }))?;
            ("guide cfg", generator.evaluations())
        }
        GuideMode::Latent => {
            let reward = build_reward(args.reward.as_deref(), &cfg, &generator, ctx)?;
            let steps = args.steps.unwrap_or(cfg.guidance.guidance_steps);
            let eta = args.eta.unwrap_or(cfg.guidance.step_size);
            generator.reset_evaluations();
            for (chunk, range) in chunks(args.n, BATCH).enumerate() {
                let z0 = prior_draws::<F, _>(range.len(), dim, z_scale, &mut rng);
                let y = labels.as_ref().map(|l| &l[range.clone()]);
                let outcome = latent_guidance(&generator, &z0, y, reward.as_ref(), eta, steps, relax, &mut rng)?;
                for (step, r) in outcome.rewards.iter().enumerate() {
                    writeln!(log, "{}", serde_json::json!({ "mode": "latent", "chunk": chunk, "step": step, "mean_reward": r }))?;
                }
                xs.extend(generator.sample_from_latents(&outcome.z, args.temperature, y, &mut rng)?);
            }
            ("guide latent", generator.evaluations())
        }
        GuideMode::RewardFt => {
            let reward = build_reward(args.reward.as_deref(), &cfg, &generator, ctx)?;
            let mut tuned_cfg = cfg.clone();
            let g = &mut tuned_cfg.guidance;
            g.finetune_steps = args.steps.unwrap_or(g.finetune_steps);
            g.finetune_learning_rate = args.eta.unwrap_or(g.finetune_learning_rate);
            g.relaxation = relax.mode;
            g.relaxation_temperature = relax.temperature;
            let mut write_err = None;
            let tuner = reward_finetune(generator, reward.as_ref(), &tuned_cfg, &mut |r| {
                if write_err.is_none() {
                    if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).expect("records serialize")) {
                        write_err = Some(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            state.adopt(tuner.generator);
            let ck_path = args.out.join("reward_ft.ckpt");
            state.to_checkpoint(&tuned_cfg).save(&ck_path)?;
            manifest.add_checkpoint(CheckpointEntry {
                path: relative(&args.out, &ck_path),
                kind: "stage_b".into(),
                epoch: state.epoch(),
                digest: state.generator.digest(),
            });
            let tuned = state.eval_generator();
            let labels = label_plan(&tuned, args.label, args.n)?;
            tuned.reset_evaluations();
            for range in chunks(args.n, BATCH) {
                let z = prior_draws::<F, _>(range.len(), dim, z_scale, &mut rng);
                let y = labels.as_ref().map(|l| &l[range.clone()]);
                xs.extend(tuned.sample_from_latents(&z, args.temperature, y, &mut rng)?);
            }
            ("guide reward-ft", tuned.evaluations())
        }
    };
    log.flush()?;
    drop(log);

    let files = write_samples(&args.out, &cfg, &xs)?;
    for f in files.iter().chain([&log_path]) {
        manifest.add_artifact(relative(&args.out, f));
    }
    manifest.nfe = Some(nfe);
    manifest.record_command(label, super::seconds_since(start));
    manifest.save(&args.out)?;
    println!(
        "{}",
        serde_json::json!({ "command": label, "samples": xs.len(), "nfe": nfe, "dump": files[0] })
    );
    Ok(())
}
