use std::path::PathBuf;
use std::time::Instant;

use coupling_core::checkpoint::write_atomic;
use coupling_core::data::load_dataset;
use coupling_core::metrics::{fid, gaussianity_diagnostics, unigram_entropy, MetricRecord, PixelEmbedding};
use coupling_core::oracle::{enumerate_generated_marginal, exact_tv, ExactDistribution};
use coupling_core::stage_a::StageAState;
use coupling_core::stage_b::StageBState;
use coupling_core::training::{init_rng, Phase};
use coupling_core::{Checkpoint, CouplingError, ExperimentConfig, Scalar, Tensor};

use super::{checkpoint_config, checkpoint_kind, load_config};
use crate::artifacts::{array_images, array_sequences, read_array};
use crate::manifest::{relative, RunManifest, MANIFEST_FILE};
use crate::{Context, EvalArgs, Precision};

/// Largest latent dimension for which the generated law is enumerated.
const MAX_ORACLE_DIM: usize = 2;

pub fn eval(args: &EvalArgs, ctx: &Context) -> anyhow::Result<()> {
    match ctx.precision {
        Precision::F32 => eval_as::<f32>(args, ctx),
        Precision::F64 => eval_as::<f64>(args, ctx),
    }
}

fn record(name: &str, value: f64, samples: usize) -> MetricRecord {
    MetricRecord {
        name: name.into(),
        value,
        samples,
        protocol_digest: None,
        protocol: serde_json::Value::Null,
    }
}

fn eval_as<F: Scalar>(args: &EvalArgs, ctx: &Context) -> anyhow::Result<()> {
    let start = Instant::now();
    let (file, array) = read_array(&args.samples)?;
    let checkpoint = args.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let cfg: Option<ExperimentConfig> = match (&args.config, &checkpoint) {
        (Some(spec), _) => Some(load_config(spec)?),
        (None, Some(ck)) => Some(checkpoint_config(ck)?),
        (None, None) => None,
    };
    let need_cfg = |metric: &str| {
        cfg.as_ref()
            .ok_or_else(|| CouplingError::config("--config", format!("`{metric}` needs --config or --checkpoint")))
    };
    let xs = array_sequences(&array, cfg.as_ref().map(|c| c.data.vocab_size))?;
    let n = xs.len();
    let mut records = Vec::new();

    for metric in &args.metrics {
        match metric.as_str() {
            "entropy" => records.push(record("entropy", unigram_entropy(&xs)?, n)),
            "fid" => {
                let reference = args
                    .reference
                    .as_ref()
                    .ok_or_else(|| CouplingError::config("--reference", "`fid` needs a reference dump"))?;
                let (_, ref_array) = read_array(reference)?;
                let (a, side) = array_images(&array)?;
                let (b, ref_side) = array_images(&ref_array)?;
                if side != ref_side {
                    return Err(CouplingError::Shape(format!("image sides differ: {side} vs {ref_side}")).into());
                }
                records.push(fid(&a, &b, side, &PixelEmbedding { side })?);
            }
            "tv" => {
                let cfg = need_cfg("tv")?;
                let law = load_dataset(cfg, ctx.data_dir.as_deref())?.exact.ok_or_else(|| {
                    CouplingError::config("data.source", "`tv` needs a synthetic source with a known law")
                })?;
                let sampled = exact_tv(&ExactDistribution::empirical(&xs)?, &law)?;
                records.push(record("tv_sampled", sampled, n));
                if let Some(ck) = checkpoint.as_ref().filter(|ck| checkpoint_kind(ck).ok().as_deref() == Some("stage_b")) {
                    let generator = StageBState::<F>::from_checkpoint(cfg, ck)?.eval_generator();
                    if generator.shape.dim() <= MAX_ORACLE_DIM {
                        let q = enumerate_generated_marginal(&generator, cfg.eval.quadrature_points)?;
                        let oracle = exact_tv(&q, &law)?;
                        records.push(record("tv_oracle", oracle, 0));
                        records.push(record("tv_estimator_gap", (oracle - sampled).abs(), n));
                    }
                }
            }
            "gaussianity" => {
                let cfg = need_cfg("gaussianity")?;
                let ck = checkpoint
                    .as_ref()
                    .filter(|ck| checkpoint_kind(ck).ok().as_deref() == Some("stage_a"))
                    .ok_or_else(|| CouplingError::config("--checkpoint", "`gaussianity` needs a stage A checkpoint"))?;
                let state = StageAState::<F>::from_checkpoint(cfg, ck)?;
                let data = load_dataset(cfg, ctx.data_dir.as_deref())?;
                let d = state.autoencoder.shape.dim();
                let noise = Tensor::randn(data.items.len(), d, F::one(), &mut init_rng(cfg.seed, Phase::Sampling));
                let report = gaussianity_diagnostics(&state.latents_for(&data.items, &noise)?)?;
                let m = data.items.len();
                records.push(record("gaussianity.max_abs_mean", report.max_abs_mean(), m));
                records.push(record("gaussianity.max_abs_std_error", report.max_abs_std_error(), m));
                records.push(record("gaussianity.max_abs_offdiag_corr", report.max_abs_offdiag_corr, m));
                records.push(record("gaussianity.max_abs_cov_error", report.max_abs_cov_error, m));
                records.push(record("gaussianity.ks_stat_max", report.ks_stat_max, m));
                records.push(record("gaussianity.degenerate", f64::from(u8::from(report.degenerate)), m));
            }
            other => {
                return Err(CouplingError::config(
                    "--metrics",
                    format!("unknown metric `{other}`; expected entropy, fid, tv or gaussianity"),
                )
                .into())
            }
        }
    }

    let out: PathBuf = args
        .out
        .clone()
        .unwrap_or_else(|| file.parent().map(|p| p.join("metrics.jsonl")).unwrap_or_else(|| "metrics.jsonl".into()));
    let mut text = String::new();
    for r in &records {
        let line = serde_json::to_string(r)?;
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(&out, text.as_bytes())?;

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).map(PathBuf::from).unwrap_or_else(|| ".".into());
    let mut manifest = RunManifest::open(&dir)?;
    if !dir.join(MANIFEST_FILE).exists() {
        if let Some(cfg) = &cfg {
            manifest.set_config(cfg, cfg.seed, ctx.deterministic);
        }
        manifest.deterministic = ctx.deterministic;
    }
    manifest.add_metric_report(relative(&dir, &out));
    manifest.record_command("eval", super::seconds_since(start));
    manifest.save(&dir)?;
    Ok(())
}
