//! Flat `key=value` text format for model checkpoints.
//!
//! ```text
//! kind=glm
//! penalty=0.01
//! intercept=-0.3
//! coef.group_B=0.12
//! ```
//!
//! Precision states use `kind=precision`, `ridge`, `n_obs`, `dim`,
//! `x_bar.<j>` and `v.<i>.<j>` (upper triangle). Floats are written in their
//! shortest round-trip form, so a parse of a write reproduces the state bit for bit.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{FittedGLM, PrecisionState, TrainDiagnostics};
use crate::error::{Error, Result};

/// Something that serializes to the checkpoint format.
pub trait KvRecord: Sized {
    fn to_kv(&self) -> String;
    fn from_kv(text: &str) -> Result<Self>;
}

/// Split text into ordered `(key, value)` pairs, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse(format!("line without '=': {l:?}")))
        })
        .collect()
}

fn float(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: not a number: {v:?}")))
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("missing key {key:?}")))
}

fn expect_kind(pairs: &[(String, String)], kind: &str) -> Result<()> {
    let got = lookup(pairs, "kind")?;
    if got != kind {
        return Err(Error::Parse(format!("expected kind={kind}, found kind={got}")));
    }
    Ok(())
}

impl KvRecord for FittedGLM {
    fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind=glm");
        let _ = writeln!(s, "penalty={:?}", self.penalty);
        let _ = writeln!(s, "n_train={}", self.diagnostics.n_train);
        let _ = writeln!(s, "intercept={:?}", self.theta[0]);
        for (name, v) in self.feature_names.iter().zip(&self.theta[1..]) {
            let _ = writeln!(s, "coef.{name}={v:?}");
        }
        s
    }

    fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        expect_kind(&pairs, "glm")?;
        let penalty = float("penalty", lookup(&pairs, "penalty")?)?;
        let n_train = lookup(&pairs, "n_train")?
            .parse()
            .map_err(|_| Error::Parse("n_train is not an integer".into()))?;
        let mut theta = vec![float("intercept", lookup(&pairs, "intercept")?)?];
        let mut names = Vec::new();
        for (k, v) in &pairs {
            if let Some(name) = k.strip_prefix("coef.") {
                names.push(name.to_string());
                theta.push(float(k, v)?);
            }
        }
        Ok(FittedGLM {
            theta,
            penalty,
            feature_names: names,
            diagnostics: TrainDiagnostics { log_loss: f64::NAN, auc: None, n_train, iterations: 0, converged: true },
        })
    }
}

impl KvRecord for PrecisionState {
    fn to_kv(&self) -> String {
        let d = self.dim();
        let mut s = String::new();
        let _ = writeln!(s, "kind=precision");
        let _ = writeln!(s, "dim={d}");
        let _ = writeln!(s, "n_obs={}", self.n_obs());
        let _ = writeln!(s, "ridge={:?}", self.ridge());
        for (j, v) in self.x_bar().iter().enumerate() {
            let _ = writeln!(s, "x_bar.{j}={v:?}");
        }
        let v = self.v_matrix();
        for a in 0..d {
            for b in a..d {
                let _ = writeln!(s, "v.{a}.{b}={:?}", v[(a, b)]);
            }
        }
        s
    }

    fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        expect_kind(&pairs, "precision")?;
        let int = |key: &str| -> Result<usize> {
            lookup(&pairs, key)?.parse().map_err(|_| Error::Parse(format!("{key} is not an integer")))
        };
        let d = int("dim")?;
        let n_obs = int("n_obs")?;
        let ridge = float("ridge", lookup(&pairs, "ridge")?)?;
        let mut x_bar = vec![f64::NAN; d];
        let mut v = DMatrix::from_element(d, d, f64::NAN);
        for (k, val) in &pairs {
            if let Some(j) = k.strip_prefix("x_bar.") {
                let j: usize = j.parse().map_err(|_| Error::Parse(format!("bad key {k}")))?;
                *x_bar.get_mut(j).ok_or_else(|| Error::Parse(format!("index out of range: {k}")))? = float(k, val)?;
            } else if let Some(rest) = k.strip_prefix("v.") {
                let (a, b) = rest
                    .split_once('.')
                    .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::Parse(format!("bad key {k}")))?;
                if a >= d || b >= d {
                    return Err(Error::Parse(format!("index out of range: {k}")));
                }
                let x = float(k, val)?;
                v[(a, b)] = x;
                v[(b, a)] = x;
            }
        }
        if x_bar.iter().chain(v.iter()).any(|x| x.is_nan()) {
            return Err(Error::Parse("precision state is incomplete".into()));
        }
        PrecisionState::from_parts(v, x_bar, ridge, n_obs)
    }
}
