use std::fmt::Write as _;

use coupling_core::checkpoint::write_atomic;
use coupling_core::oracle::run_oracle_suite;
use coupling_core::training::{init_rng, Phase};
use coupling_core::CouplingError;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{CheckFailed, OracleArgs, ReportArgs};

pub fn oracle(args: &OracleArgs) -> anyhow::Result<()> {
    let mut rng = init_rng(args.seed, Phase::Sampling);
    let records = run_oracle_suite(args.suite.into(), args.count, &mut rng)?;
    let mut text = String::new();
    for r in &records {
        let line = serde_json::to_string(r)?;
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    if let Some(out) = &args.out {
        write_atomic(out, text.as_bytes())?;
    }
    let failed: Vec<&str> = records.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    eprintln!("oracle: {} of {} checks passed", records.len() - failed.len(), records.len());
    if !failed.is_empty() {
        return Err(CheckFailed(format!("failed oracle checks: {}", failed.join(", "))).into());
    }
    Ok(())
}

/// Markdown summary of each run directory: checkpoints, NFE and every
/// metric line found in its reports.
pub fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let mut out = String::new();
    for dir in &args.runs {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(CouplingError::Prerequisite(format!("no manifest in {}", dir.display())).into());
        }
        let m = RunManifest::open(dir)?;
        writeln!(out, "## {}\n", dir.display())?;
        writeln!(out, "- version {}, seed {}, deterministic {}", m.code_version, m.seed, m.deterministic)?;
        writeln!(out, "- config digest `{}`", m.config_digest)?;
        writeln!(out, "- commands: {}", m.commands.join(", "))?;
        if let Some(nfe) = m.nfe {
            writeln!(out, "- NFE: {nfe}")?;
        }
        for (cmd, secs) in &m.timings {
            writeln!(out, "- {cmd}: {secs:.1} s")?;
        }
        if !m.checkpoints.is_empty() {
            writeln!(out, "\n| checkpoint | kind | epoch | digest |\n|---|---|---|---|")?;
            for c in &m.checkpoints {
                writeln!(out, "| {} | {} | {} | `{}` |", c.path, c.kind, c.epoch, &c.digest[..c.digest.len().min(16)])?;
            }
        }
        for rel in &m.metric_reports {
            let text = std::fs::read_to_string(dir.join(rel))?;
            writeln!(out, "\n| {rel} | value | samples |\n|---|---|---|")?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)?;
                writeln!(
                    out,
                    "| {} | {} | {} |",
                    v["name"].as_str().unwrap_or("?"),
                    v["value"],
                    v["samples"]
                )?;
            }
        }
        writeln!(out)?;
    }
    print!("{out}");
    Ok(())
}
