//! Single-run execution and the sweep fan-out: a bounded worker pool over
//! independent member configs, and an aggregator that refuses to mix
//! artifacts recorded under a different configuration hash.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use schrokernel_core::Verdict;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::artifacts::{write_manifest, ArtifactSink, Check};
use crate::config::ExperimentConfig;
use crate::pipelines;

pub struct SingleOutcome {
    pub hash: String,
    pub verdict: Verdict,
    pub checks: Vec<Check>,
}

/// Run one pipeline on one resolved config, writing artifacts and the run
/// manifest into the config's output directory.
pub fn run_single(subcommand: &str, cfg: &ExperimentConfig, strict: bool) -> Result<SingleOutcome> {
    let start = Instant::now();
    let hash = cfg.hash();
    let mut sink = ArtifactSink::new(&cfg.output.dir, &hash)?;
    let (checks, skipped) = match subcommand {
        "audit-hyp" => (pipelines::audit_hyp(cfg, &mut sink)?, Vec::new()),
        "audit-lyapunov" => (pipelines::audit_lyapunov(cfg, &mut sink)?, Vec::new()),
        "kernel" => (pipelines::kernel(cfg, &mut sink)?, Vec::new()),
        "bounds" => (pipelines::bounds(cfg, &mut sink)?, Vec::new()),
        "spectrum" => (pipelines::spectrum(cfg, &mut sink)?, Vec::new()),
        "all" => pipelines::all(cfg, &mut sink)?,
        other => bail!("unknown subcommand \"{other}\""),
    };
    let verdict = write_manifest(
        &mut sink,
        subcommand,
        &checks,
        &skipped,
        start.elapsed().as_millis(),
        strict,
    )?;
    Ok(SingleOutcome {
        hash,
        verdict,
        checks,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: SweepBlock,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepBlock {
    /// Pipeline to run for every member: any non-sweep subcommand.
    subcommand: String,
    /// Member config paths, relative to the sweep file.
    configs: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ManifestPeek {
    config_hash: String,
    subcommand: String,
    verdict: Verdict,
    checks: Vec<CheckPeek>,
}

#[derive(Debug, Deserialize)]
struct CheckPeek {
    name: String,
    verdict: Verdict,
    worst_margin: f64,
}

struct Member {
    name: String,
    cfg: ExperimentConfig,
    hash: String,
}

struct MemberRow {
    name: String,
    hash: String,
    verdict: Verdict,
    checks: Vec<(String, Verdict, f64)>,
}

/// Fan the members out to `jobs` workers, then aggregate their manifests.
/// A member directory whose manifest records a different config hash is a
/// stale or foreign run: aggregation refuses it rather than mixing results.
pub fn run_sweep(
    path: &Path,
    jobs: Option<usize>,
    out: Option<&Path>,
    seed: Option<u64>,
    strict: bool,
) -> Result<Verdict> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading sweep {}", path.display()))?;
    let sweep: SweepFile =
        toml::from_str(&text).with_context(|| format!("parsing sweep {}", path.display()))?;
    if sweep.sweep.subcommand == "sweep" {
        bail!("sweeps do not nest");
    }
    if sweep.sweep.configs.is_empty() {
        bail!("invalid sweep: requires at least one member config");
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("sweep_out"));

    let mut members = Vec::new();
    for member_path in &sweep.sweep.configs {
        let full = base.join(member_path);
        let name = full
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("member{}", members.len()));
        if members.iter().any(|m: &Member| m.name == name) {
            bail!("duplicate sweep member name \"{name}\": member files need distinct stems");
        }
        let cfg = ExperimentConfig::load(&full)?
            .resolved(Some(&out_dir.join(&name)), seed);
        let hash = cfg.hash();
        members.push(Member { name, cfg, hash });
    }

    // Refuse directories holding artifacts of a different configuration
    // before spending any compute; matching runs are reused as-is.
    let mut reused: Vec<Option<MemberRow>> = Vec::new();
    for m in &members {
        reused.push(peek_member(m, &sweep.sweep.subcommand)?);
    }

    let queue: Mutex<VecDeque<usize>> = Mutex::new(
        (0..members.len())
            .filter(|i| reused[*i].is_none())
            .collect(),
    );
    let fresh: Mutex<Vec<(usize, MemberRow)>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let workers = jobs
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(usize::from)
                .unwrap_or(1)
        })
        .clamp(1, members.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => return,
                };
                let m = &members[idx];
                match run_single(&sweep.sweep.subcommand, &m.cfg, strict) {
                    Ok(outcome) => fresh.lock().unwrap().push((
                        idx,
                        MemberRow {
                            name: m.name.clone(),
                            hash: outcome.hash,
                            verdict: outcome.verdict,
                            checks: outcome
                                .checks
                                .iter()
                                .map(|c| (c.name.clone(), c.effective(strict), c.worst_margin))
                                .collect(),
                        },
                    )),
                    Err(e) => failures
                        .lock()
                        .unwrap()
                        .push(format!("member \"{}\": {e:#}", m.name)),
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    if let Some(first) = failures.first() {
        bail!("{first}");
    }
    let mut rows: Vec<MemberRow> = Vec::with_capacity(members.len());
    let mut fresh = fresh.into_inner().unwrap();
    fresh.sort_by_key(|(i, _)| *i);
    let mut fresh = fresh.into_iter().peekable();
    for (i, slot) in reused.into_iter().enumerate() {
        match slot {
            Some(row) => rows.push(row),
            None => {
                let (j, row) = fresh.next().expect("every queued member reported");
                debug_assert_eq!(i, j);
                rows.push(row);
            }
        }
    }

    // The aggregator trusts only what is on disk: re-read every manifest and
    // compare its recorded hash against the member's resolved config.
    for m in &members {
        let peek = read_manifest(&m.cfg.output.dir)?;
        if peek.config_hash != m.hash {
            bail!(
                "refusing to aggregate \"{}\": its artifacts record config hash {} but the member config hashes to {}; remove {} and rerun",
                m.name,
                &peek.config_hash[..12.min(peek.config_hash.len())],
                &m.hash[..12],
                m.cfg.output.dir.display()
            );
        }
    }

    let sweep_hash = {
        let mut h = Sha256::new();
        h.update(sweep.sweep.subcommand.as_bytes());
        for row in &rows {
            h.update(b"|");
            h.update(row.hash.as_bytes());
        }
        hex::encode(h.finalize())
    };
    fs::create_dir_all(&out_dir)?;
    let summary_path = out_dir.join("sweep_summary.csv");
    let mut w = BufWriter::new(File::create(&summary_path)?);
    writeln!(w, "# config_hash={sweep_hash}")?;
    writeln!(w, "config,config_hash,check,verdict,worst_margin")?;
    for row in &rows {
        for (name, verdict, margin) in &row.checks {
            writeln!(
                w,
                "{},{},{name},{verdict},{margin:.17e}",
                row.name, row.hash
            )?;
        }
    }
    w.flush()?;

    let overall = Verdict::from_bool(rows.iter().all(|r| r.verdict.is_pass()));
    let manifest = serde_json::json!({
        "config_hash": sweep_hash,
        "subcommand": "sweep",
        "member_subcommand": sweep.sweep.subcommand,
        "members": rows
            .iter()
            .map(|r| serde_json::json!({
                "name": r.name,
                "config_hash": r.hash,
                "verdict": r.verdict,
            }))
            .collect::<Vec<_>>(),
        "verdict": overall,
    });
    let mut mw = BufWriter::new(File::create(out_dir.join("sweep_manifest.json"))?);
    serde_json::to_writer_pretty(&mut mw, &manifest)?;
    writeln!(mw)?;
    mw.flush()?;

    for row in &rows {
        println!(
            "member {}: {} (config {})",
            row.name,
            row.verdict,
            &row.hash[..8]
        );
    }
    println!("sweep: {overall} ({} members)", rows.len());
    Ok(overall)
}

/// Inspect a member's output directory. No manifest means a fresh run; a
/// manifest matching (hash, subcommand) is reused; anything else is refused.
fn peek_member(m: &Member, subcommand: &str) -> Result<Option<MemberRow>> {
    let manifest = m.cfg.output.dir.join("manifest.json");
    if !manifest.exists() {
        return Ok(None);
    }
    let peek = read_manifest(&m.cfg.output.dir)?;
    if peek.config_hash != m.hash || peek.subcommand != subcommand {
        bail!(
            "refusing to aggregate \"{}\": {} holds artifacts for config hash {} ({}), expected {} ({}); remove the directory to rerun",
            m.name,
            m.cfg.output.dir.display(),
            &peek.config_hash[..12.min(peek.config_hash.len())],
            peek.subcommand,
            &m.hash[..12],
            subcommand
        );
    }
    Ok(Some(MemberRow {
        name: m.name.clone(),
        hash: peek.config_hash,
        verdict: peek.verdict,
        checks: peek
            .checks
            .into_iter()
            .map(|c| (c.name, c.verdict, c.worst_margin))
            .collect(),
    }))
}

fn read_manifest(dir: &Path) -> Result<ManifestPeek> {
    let path = dir.join("manifest.json");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
