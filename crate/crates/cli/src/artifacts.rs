//! Artifact plumbing: hash-stamped CSV/JSON writers, the run manifest, and
//! the operator cache behind SCHROKERNEL_CACHE.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use schrokernel_core::{assemble, CoefficientField, DiscreteOperator, Family, Grid, Verdict};
use schrokernel_core::linalg::SymCsr;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes every artifact of one run into one directory, stamping each with
/// the resolved-config hash and remembering the names for the manifest.
pub struct ArtifactSink {
    dir: PathBuf,
    hash: String,
    written: Vec<String>,
}

impl ArtifactSink {
    pub fn new(dir: &Path, hash: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(ArtifactSink {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn open(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    /// CSV with the config hash on a leading comment line.
    pub fn csv(
        &mut self,
        name: &str,
        header: &str,
        rows: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        let mut w = self.open(name)?;
        writeln!(w, "# config_hash={}", self.hash)?;
        writeln!(w, "{header}")?;
        rows(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// JSON report wrapped as {config_hash, report}.
    pub fn json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<()> {
        let mut w = self.open(name)?;
        let doc = serde_json::json!({ "config_hash": self.hash, "report": report });
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Free-form text artifact; the hash still goes on the first line.
    pub fn raw(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut w = self.open(name)?;
        writeln!(w, "# config_hash={}", self.hash)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn artifacts(&self) -> &[String] {
        &self.written
    }
}

/// One named pass/fail outcome of a pipeline. `scale` is the margin unit at
/// which a pass within five percent counts as a near-miss warning.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub worst_margin: f64,
    pub scale: f64,
}

impl Check {
    pub fn new(name: &str, verdict: Verdict, worst_margin: f64, scale: f64) -> Self {
        Check {
            name: name.to_string(),
            verdict,
            worst_margin,
            scale,
        }
    }

    pub fn warning(&self) -> bool {
        self.verdict.is_pass() && self.worst_margin < 0.05 * self.scale
    }

    /// Verdict under the requested strictness.
    pub fn effective(&self, strict: bool) -> Verdict {
        if strict && self.warning() {
            Verdict::Fail
        } else {
            self.verdict
        }
    }
}

#[derive(Debug, Serialize)]
struct CheckRow<'a> {
    name: &'a str,
    verdict: Verdict,
    worst_margin: f64,
    warning: bool,
}

#[derive(Debug, Serialize)]
struct ManifestDoc<'a> {
    config_hash: &'a str,
    subcommand: &'a str,
    versions: BTreeMap<&'static str, &'static str>,
    wall_ms: u128,
    strict: bool,
    checks: Vec<CheckRow<'a>>,
    skipped: &'a [String],
    artifacts: &'a [String],
    verdict: Verdict,
}

/// Write manifest.json and return the overall verdict under `strict`.
pub fn write_manifest(
    sink: &mut ArtifactSink,
    subcommand: &str,
    checks: &[Check],
    skipped: &[String],
    wall_ms: u128,
    strict: bool,
) -> Result<Verdict> {
    let overall = Verdict::from_bool(checks.iter().all(|c| c.effective(strict).is_pass()));
    let hash = sink.hash().to_string();
    let doc = ManifestDoc {
        config_hash: &hash,
        subcommand,
        versions: BTreeMap::from([
            ("schrokernel-cli", env!("CARGO_PKG_VERSION")),
            ("schrokernel-core", schrokernel_core::VERSION),
        ]),
        wall_ms,
        strict,
        checks: checks
            .iter()
            .map(|c| CheckRow {
                name: &c.name,
                verdict: c.verdict,
                worst_margin: c.worst_margin,
                warning: c.warning(),
            })
            .collect(),
        skipped,
        artifacts: sink.artifacts(),
        verdict: overall,
    };
    let path = sink.dir().join("manifest.json");
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(overall)
}

/// Assemble the operator, or reload it from the directory named by
/// SCHROKERNEL_CACHE when an entry for this (field, grid) pair exists.
/// Custom fields are never cached: closures have no stable identity.
pub fn obtain_operator(field: &CoefficientField, grid: &Grid) -> Result<DiscreteOperator> {
    let cache_dir = match std::env::var_os("SCHROKERNEL_CACHE") {
        Some(dir) if !matches!(field.family, Family::Custom { .. }) => PathBuf::from(dir),
        _ => return Ok(assemble(field, grid)?),
    };
    let field_desc = field.descriptor();
    let grid_desc = grid.descriptor();
    let key = {
        let mut h = Sha256::new();
        h.update(field_desc.as_bytes());
        h.update(b"|");
        h.update(grid_desc.as_bytes());
        h.update(format!("|eta={:.17e}", field.eta));
        hex::encode(h.finalize())[..16].to_string()
    };
    let path = cache_dir.join(format!("op-{key}.txt"));
    if let Some(op) = load_cached(&path, field, grid, &field_desc, &grid_desc) {
        return Ok(op);
    }
    let op = assemble(field, grid)?;
    // Cache write failures only cost the reuse, never the run.
    let _ = store_cached(&cache_dir, &path, &op, &field_desc, &grid_desc);
    Ok(op)
}

fn load_cached(
    path: &Path,
    field: &CoefficientField,
    grid: &Grid,
    field_desc: &str,
    grid_desc: &str,
) -> Option<DiscreteOperator> {
    let file = File::open(path).ok()?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next()?.ok()?;
    if header != "schrokernel operator cache v1" {
        return None;
    }
    if lines.next()?.ok()? != format!("field={field_desc}") {
        return None;
    }
    if lines.next()?.ok()? != format!("grid={grid_desc}") {
        return None;
    }
    let n: usize = lines.next()?.ok()?.strip_prefix("n=")?.parse().ok()?;
    if n != grid.n {
        return None;
    }
    let mut v_diag = Vec::with_capacity(n);
    let mut triplets = Vec::new();
    for line in lines {
        let line = line.ok()?;
        let mut parts = line.split_whitespace();
        match parts.next()? {
            "V" => v_diag.push(parts.next()?.parse().ok()?),
            "M" => {
                let i = parts.next()?.parse().ok()?;
                let j = parts.next()?.parse().ok()?;
                let v = parts.next()?.parse().ok()?;
                triplets.push((i, j, v));
            }
            _ => return None,
        }
    }
    if v_diag.len() != n {
        return None;
    }
    let matrix = SymCsr::from_triplets(n, triplets).ok()?;
    Some(DiscreteOperator {
        matrix,
        grid: *grid,
        eta: field.eta,
        field: field.clone(),
        v_diag,
    })
}

fn store_cached(
    dir: &Path,
    path: &Path,
    op: &DiscreteOperator,
    field_desc: &str,
    grid_desc: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    // Concurrent sweep workers may race on one entry; a rename keeps every
    // reader seeing either nothing or a complete file.
    static STAMP: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let tmp = path.with_extension(format!(
        "tmp{}-{}",
        std::process::id(),
        STAMP.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "schrokernel operator cache v1")?;
        writeln!(w, "field={field_desc}")?;
        writeln!(w, "grid={grid_desc}")?;
        writeln!(w, "n={}", op.grid.n)?;
        for v in &op.v_diag {
            writeln!(w, "V {v:.17e}")?;
        }
        for (i, j, v) in op.matrix.triplets() {
            writeln!(w, "M {i} {j} {v:.17e}")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
