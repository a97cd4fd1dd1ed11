mod eval;
mod guide;
mod oracle;
mod sample;
mod train;

use std::path::Path;

use coupling_core::config::{validate_config, PROFILES};
use coupling_core::stage_b::OneStepGenerator;
use coupling_core::{Checkpoint, CouplingError, ExperimentConfig, Scalar};

pub use eval::eval;
pub use guide::guide;
pub use oracle::{oracle, report};
pub use sample::sample;
pub use train::train;

/// A config file, or a built-in profile by name.
pub fn load_config(spec: &str) -> anyhow::Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(ExperimentConfig::from_file(path)?);
    }
    if PROFILES.contains(&spec) {
        return Ok(validate_config(ExperimentConfig::profile(spec)?)?);
    }
    Err(CouplingError::config(
        "--config",
        format!("`{spec}` is neither a file nor one of {}", PROFILES.join(", ")),
    )
    .into())
}

/// The config a checkpoint was trained with.
pub fn checkpoint_config(ck: &Checkpoint) -> anyhow::Result<ExperimentConfig> {
    let text: String = ck.meta_value("config")?;
    Ok(ExperimentConfig::from_toml_str(&text)?)
}

pub fn checkpoint_kind(ck: &Checkpoint) -> anyhow::Result<String> {
    Ok(ck.meta_value("kind")?)
}

/// Per-sample labels: the requested label everywhere, or every class in turn.
/// `None` for an unconditional generator.
pub fn label_plan<F: Scalar>(
    generator: &OneStepGenerator<F>,
    label: Option<usize>,
    n: usize,
) -> anyhow::Result<Option<Vec<usize>>> {
    match (generator.is_conditional(), label) {
        (false, None) => Ok(None),
        (false, Some(_)) => Err(CouplingError::config("--label", "the generator is unconditional").into()),
        (true, Some(y)) if y >= generator.num_classes => Err(CouplingError::config(
            "--label",
            format!("must be below {}", generator.num_classes),
        )
        .into()),
        (true, Some(y)) => Ok(Some(vec![y; n])),
        (true, None) => Ok(Some((0..n).map(|i| i % generator.num_classes).collect())),
    }
}

/// Half-open ranges of at most `batch` items covering `0..n`.
pub fn chunks(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let batch = batch.max(1);
    (0..n).step_by(batch).map(move |s| s..(s + batch).min(n))
}

pub fn require_positive(field: &str, n: usize) -> anyhow::Result<()> {
    if n == 0 {
        return Err(CouplingError::config(field, "must be at least 1").into());
    }
    Ok(())
}

pub fn seconds_since(start: std::time::Instant) -> f64 {
    start.elapsed().as_secs_f64()
}
