use std::time::Instant;

use coupling_core::mdm::{p2_self_sample_batch, MdmState, P2SelfOptions};
use coupling_core::stage_b::{prior_draws, StageBState};
use coupling_core::training::{init_rng, Phase};
use coupling_core::{Checkpoint, CouplingError, ExperimentConfig, Scalar, TokenSequence};

use super::{checkpoint_config, checkpoint_kind, chunks, label_plan, require_positive};
use crate::artifacts::write_samples;
use crate::manifest::{relative, RunManifest};
use crate::{Context, Precision, SampleArgs, SampleMode};

pub fn sample(args: &SampleArgs, ctx: &Context) -> anyhow::Result<()> {
    match ctx.precision {
        Precision::F32 => sample_as::<f32>(args, ctx),
        Precision::F64 => sample_as::<f64>(args, ctx),
    }
}

/// Sampler options from the config with command-line overrides.
pub fn p2self_options(cfg: &ExperimentConfig, args: &SampleArgs) -> anyhow::Result<P2SelfOptions> {
    let steps = args.steps.unwrap_or(cfg.mdm.steps);
    require_positive("--steps", steps)?;
    let temperatures = match &args.temps {
        Some(t) if t.len() == 1 => vec![t[0]; steps],
        Some(t) => t.clone(),
        None => cfg.mdm.step_temperatures(steps),
    };
    if temperatures.len() != steps {
        return Err(CouplingError::config(
            "--temps",
            format!("{} temperatures for {steps} steps", temperatures.len()),
        )
        .into());
    }
    if temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(CouplingError::config("--temps", "temperatures must be positive").into());
    }
    let remask_strength = args.remask_strength.unwrap_or(cfg.mdm.remask_strength);
    if !remask_strength.is_finite() {
        return Err(CouplingError::config("--remask-strength", "must be finite").into());
    }
    Ok(P2SelfOptions {
        steps,
        schedule: args.schedule.map(Into::into).unwrap_or(cfg.mdm.schedule).into(),
        temperatures,
        remask_strength,
    })
}

fn sample_as<F: Scalar>(args: &SampleArgs, ctx: &Context) -> anyhow::Result<()> {
    let start = Instant::now();
    require_positive("--n", args.n)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let kind = checkpoint_kind(&ck)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut rng = init_rng(seed, Phase::Sampling);
    let z_scale = args.z_scale.unwrap_or(cfg.stage_b.z_scale);
    let mut xs: Vec<TokenSequence> = Vec::with_capacity(args.n);

    let (label, nfe) = match args.mode {
        SampleMode::OneStep => {
            if kind != "stage_b" {
                return Err(CouplingError::config(
                    "--mode",
                    format!("one-step sampling needs a stage B checkpoint, got `{kind}`"),
                )
                .into());
            }
            let generator = StageBState::<F>::from_checkpoint(&cfg, &ck)?.eval_generator();
            let labels = label_plan(&generator, args.label, args.n)?;
            generator.reset_evaluations();
            for range in chunks(args.n, args.batch) {
                let z = prior_draws::<F, _>(range.len(), generator.shape.dim(), z_scale, &mut rng);
                let y = labels.as_ref().map(|l| &l[range.clone()]);
                xs.extend(generator.sample_from_latents(&z, args.temperature, y, &mut rng)?);
            }
            ("sample one-step", generator.evaluations())
        }
        SampleMode::P2self => {
            if kind != "mdm" && kind != "baseline" {
                return Err(CouplingError::config(
                    "--mode",
                    format!("p2self sampling needs a denoiser checkpoint, got `{kind}`"),
                )
                .into());
            }
            let opts = p2self_options(&cfg, args)?;
            let denoiser = MdmState::<F>::from_checkpoint(&cfg, &ck)?.denoiser;
            let fixed = vec![None; denoiser.seq_len];
            denoiser.reset_evaluations();
            for range in chunks(args.n, args.batch) {
                let z = denoiser
                    .latent
                    .map(|shape| prior_draws::<F, _>(range.len(), shape.dim(), z_scale, &mut rng));
                let traces = p2_self_sample_batch(&denoiser, z.as_ref(), range.len(), &fixed, &opts, &mut rng)?;
                xs.extend(traces.into_iter().map(|t| t.sequence));
            }
            ("sample p2self", denoiser.evaluations())
        }
    };

    std::fs::create_dir_all(&args.out)?;
    let files = write_samples(&args.out, &cfg, &xs)?;
    let mut manifest = RunManifest::open(&args.out)?;
    manifest.set_config(&cfg, seed, ctx.deterministic);
    for f in &files {
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
