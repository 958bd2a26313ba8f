//! Run directories, delimited tables and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";

/// Create `<base>/<hash prefix>-<timestamp>`, adding a numeric suffix when
/// the name is taken.
pub fn create_run_dir(base: &Path, hash: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(base).with_context(|| format!("cannot create {}", base.display()))?;
    let stem = format!("{}-{}", &hash[..12], chrono::Local::now().format("%Y%m%dT%H%M%S"));
    create_fresh(base, &stem)
}

/// Create `<parent>/<stem>` or the first free `<stem>-<n>`.
pub fn create_fresh(parent: &Path, stem: &str) -> anyhow::Result<PathBuf> {
    for n in 0.. {
        let name = if n == 0 { stem.to_string() } else { format!("{stem}-{n}") };
        let path = parent.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("cannot create {}", path.display())),
        }
    }
    unreachable!()
}

pub fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed-{seed}"))
}

/// Seed subdirectories of a run, in seed order.
pub fn seed_dirs(run: &Path) -> anyhow::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(run).with_context(|| format!("cannot read run directory {}", run.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            if entry.file_type()?.is_dir() {
                out.push((seed, entry.path()));
            }
        }
    }
    if out.is_empty() {
        bail!("no seed-<n> directories in {}", run.display());
    }
    out.sort();
    Ok(out)
}

/// Write `rows` under `header` as comma-separated text.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a comma-separated table.
pub fn read_table(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .with_context(|| format!("malformed table {}", path.display()))?;
    Ok((header, rows))
}

/// Concatenate per-seed tables of the same name into one table with a
/// leading `seed` column.
pub fn merge_tables(run: &Path, seeds: &[(u64, PathBuf)], relative: &str, out: &Path) -> anyhow::Result<()> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (seed, dir) in seeds {
        let path = dir.join(relative);
        if !path.exists() {
            continue;
        }
        let (h, body) = read_table(&path)?;
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => bail!("{} has a different header in {}", relative, dir.display()),
            _ => {}
        }
        rows.extend(body.into_iter().map(|mut r| {
            r.insert(0, seed.to_string());
            r
        }));
    }
    let Some(h) = header else { return Ok(()) };
    let mut full = vec!["seed"];
    full.extend(h.iter().map(String::as_str));
    write_table(&run.join(out), &full, &rows)
}

pub fn fmt(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    v.to_string()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub versions: Versions,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub screening_core: String,
    pub screening_cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Self { screening_core: screening_core::VERSION.to_string(), screening_cli: env!("CARGO_PKG_VERSION").to_string() }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walks below root").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            out.push(FileEntry { path: rel, sha256: hex::encode(Sha256::digest(fs::read(&path)?)) });
        }
    }
    Ok(())
}

/// Copy the canonical config into `dir` and write a manifest covering every
/// file below it.
pub fn finish_dir(dir: &Path, command: &str, cfg: &RunConfig, seeds: &[u64]) -> anyhow::Result<()> {
    fs::write(dir.join(CONFIG), cfg.canonical()?)?;
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash()?,
        seeds: seeds.to_vec(),
        versions: Versions::current(),
        files,
    };
    fs::write(dir.join(MANIFEST), toml::to_string(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}
