//! Metrics files.
//!
//! Layout of an output directory:
//!
//! ```text
//! summary.json
//! profile.csv, profile.json          when a profile table was built
//! <run>/steps.jsonl                   per-step metrics
//! <run>/learner.jsonl                 one line per drafter update
//! <run>/switches.jsonl                engine mode switches
//! <run>/cycles.jsonl                  per-cycle metrics of the first step
//! skew.json                           skew demo only
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context as _;
use serde::Serialize;
use serde_json::json;
use specrl_core::server::ProfileTable;

use crate::scenarios::ScenarioOutput;

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_bytes(path, &text)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    file.write_all(bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_profile(dir: &Path, table: &ProfileTable) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_bytes(&dir.join("profile.csv"), table.to_csv().as_bytes())?;
    let mut text = table.to_json()?.into_bytes();
    text.push(b'\n');
    write_bytes(&dir.join("profile.json"), &text)
}

pub fn write_scenario(dir: &Path, output: &ScenarioOutput) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(table) = &output.table {
        write_profile(dir, table)?;
    }
    for run in &output.runs {
        let run_dir = dir.join(&run.summary.label);
        fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        write_jsonl(&run_dir.join("steps.jsonl"), &run.steps)?;
        write_jsonl(&run_dir.join("learner.jsonl"), &run.learner)?;
        write_jsonl(&run_dir.join("switches.jsonl"), &run.switches)?;
        write_jsonl(&run_dir.join("cycles.jsonl"), &run.first_step_cycles)?;
    }
    if let Some(skew) = &output.skew {
        write_json(&dir.join("skew.json"), skew)?;
    }
    let runs: Vec<_> = output.runs.iter().map(|r| &r.summary).collect();
    let best = output.table.as_ref().map(|t| {
        t.buckets.iter().zip(&t.best).map(|(b, c)| json!({ "bucket": b, "config": c.label() })).collect::<Vec<_>>()
    });
    let summary = json!({
        "scenario": output.scenario,
        "seed": output.seed,
        "runs": runs,
        "profile_best": best,
        "skew": output.skew.as_ref().map(|s| json!({
            "adaptive_time": s.adaptive_time,
            "non_spec_time": s.non_spec_time,
            "best_fixed": s.best_fixed,
            "worst_fixed": s.worst_fixed,
            "early_fraction": s.early_fraction,
            "late_fraction": s.late_fraction,
            "switches": s.switch_log.len(),
        })),
    });
    write_json(&dir.join("summary.json"), &summary)
}
