//! Command-line front end: declarative configs, run directories and the
//! `generate`, `run`, `evaluate`, `iv`, `drift` and `report` subcommands.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_drift, cmd_evaluate, cmd_generate, cmd_iv, cmd_report, cmd_run, load_run, LoadedRun};
pub use config::RunConfig;

use anyhow::{bail, Context};

/// Parse a seed list: `7`, `1,4,9`, `0..5` (end excluded) or `0..=4`.
pub fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (b, inclusive) = match b.strip_prefix('=') {
                Some(b) => (b, true),
                None => (b, false),
            };
            let a: u64 = a.trim().parse().with_context(|| format!("bad seed range {part:?}"))?;
            let b: u64 = b.trim().parse().with_context(|| format!("bad seed range {part:?}"))?;
            let end = if inclusive { b.checked_add(1).context("seed range overflows")? } else { b };
            if end <= a {
                bail!("empty seed range {part:?}");
            }
            seeds.extend(a..end);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    seeds.sort_unstable();
    seeds.dedup();
    Ok(seeds)
}

/// Machine-parsable one-line rendering of an error: `error kind=<kind> message="<chain>"`.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| {
            if let Some(core) = e.downcast_ref::<screening_core::Error>() {
                Some(match core {
                    screening_core::Error::Config(_) => "config",
                    screening_core::Error::Parse(_) | screening_core::Error::Csv(_) => "parse",
                    screening_core::Error::Io(_) => "io",
                    _ => "compute",
                })
            } else if e.downcast_ref::<toml::de::Error>().is_some() {
                Some("config")
            } else if e.downcast_ref::<std::io::Error>().is_some() {
                Some("io")
            } else {
                None
            }
        })
        .unwrap_or("error");
    let message: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let message = message.join(": ").split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'");
    format!("error kind={kind} message=\"{message}\"")
}
