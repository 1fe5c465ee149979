//! Experiment files: a small sectioned `key = value` dialect.
//!
//! ```text
//! # comments run to end of line
//! [coefficient]
//! sigma = 2+sin(m)
//!
//! [fast]
//! kind = ou            # or: langevin, with `drift = V'(m)`
//! m0 = 0
//!
//! [sim]
//! epsilon = 0.1        # or: epsilons = 0.2, 0.1, 0.05 (strictly decreasing)
//! T = 1
//! x0 = 0
//! n_samples = 10000
//! base_seed = 42
//! h_max = 0.01         # optional
//! c = 0.1              # optional
//! phi = m*m            # optional test function, x -> y and m -> z
//!
//! [outputs]
//! directory = results  # optional
//! formats = csv, json  # optional
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use refavg_core::averaging::AveragingError;
use refavg_core::expr::{ExprError, Var};
use refavg_core::fast::FastError;
use refavg_core::sim::{DEFAULT_COUPLING, DEFAULT_H_MAX};
use refavg_core::{CoefficientFn, FastProcessSpec, InvariantMeasure, SimConfig, TestFunction};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::output::Format;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing required key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String, line: usize },
    #[error("line {line}: [{section}] {key}: {msg}")]
    InvalidValue {
        section: String,
        key: String,
        line: usize,
        msg: String,
    },
    #[error("[{section}] {key}: {msg}")]
    Range { section: String, key: String, msg: String },
    #[error("line {line}: [{section}] {key}: {source}")]
    Expr {
        section: String,
        key: String,
        line: usize,
        source: ExprError,
    },
    #[error("invariant measure: {0}")]
    Measure(#[from] AveragingError),
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Syntax { line, .. }
            | ConfigError::UnknownKey { line, .. }
            | ConfigError::InvalidValue { line, .. }
            | ConfigError::Expr { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub fn location(&self) -> Option<(&str, &str)> {
        match self {
            ConfigError::MissingKey { section, key }
            | ConfigError::UnknownKey { section, key, .. }
            | ConfigError::InvalidValue { section, key, .. }
            | ConfigError::Range { section, key, .. }
            | ConfigError::Expr { section, key, .. } => Some((section, key)),
            _ => None,
        }
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("coefficient", &["sigma"]),
    ("fast", &["kind", "drift", "m0"]),
    (
        "sim",
        &["epsilon", "epsilons", "T", "x0", "h_max", "c", "n_samples", "base_seed", "phi"],
    ),
    ("outputs", &["directory", "formats"]),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw sections as read from the file, before interpretation.
#[derive(Debug, Default)]
struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut current: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    msg: format!("unterminated section header `{content}`"),
                })?;
                let name = name.trim();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                if raw.sections.contains_key(name) {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        msg: format!("section [{name}] appears twice"),
                    });
                }
                raw.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let section = current.clone().ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("key `{key}` appears before any [section] header"),
            })?;
            let allowed = KNOWN.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    section,
                    key: key.to_string(),
                    line: line_no,
                });
            }
            if value.is_empty() {
                return Err(ConfigError::InvalidValue {
                    section,
                    key: key.to_string(),
                    line: line_no,
                    msg: "empty value".to_string(),
                });
            }
            let entries = raw.sections.get_mut(&section).expect("section registered");
            if entries.contains_key(key) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("key `{key}` repeated in [{section}]"),
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line: line_no,
                },
            );
        }
        Ok(raw)
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    fn require(&self, section: &str, key: &str) -> Result<&Entry, ConfigError> {
        self.get(section, key).ok_or_else(|| ConfigError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }
}

fn invalid(section: &str, key: &str, entry: &Entry, msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        section: section.to_string(),
        key: key.to_string(),
        line: entry.line,
        msg: msg.into(),
    }
}

fn parse_f64(section: &str, key: &str, entry: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = entry
        .value
        .parse()
        .map_err(|_| invalid(section, key, entry, format!("`{}` is not a number", entry.value)))?;
    if !v.is_finite() {
        return Err(invalid(section, key, entry, "value must be finite"));
    }
    Ok(v)
}

fn parse_u64(section: &str, key: &str, entry: &Entry) -> Result<u64, ConfigError> {
    entry.value.parse().map_err(|_| {
        invalid(
            section,
            key,
            entry,
            format!("`{}` is not a non-negative integer", entry.value),
        )
    })
}

fn range(section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        section: section.to_string(),
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn check_eps(eps: f64, key: &str) -> Result<(), ConfigError> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(range("sim", key, format!("epsilon must lie in (0, 1), got {eps}")))
    }
}

#[derive(Debug, Clone)]
pub enum FastChoice {
    OrnsteinUhlenbeck,
    Langevin { drift: CoefficientFn },
}

/// A validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub sigma: CoefficientFn,
    pub fast: FastChoice,
    pub m0: f64,
    /// Strictly decreasing; a single value for one-epsilon files.
    pub epsilons: Vec<f64>,
    pub horizon: f64,
    pub x0: f64,
    pub h_max: f64,
    pub coupling: f64,
    pub n_samples: usize,
    pub base_seed: u64,
    pub phi: TestFunction,
    pub output_dir: Option<PathBuf>,
    pub formats: Vec<Format>,
    /// Non-fatal findings, e.g. a coefficient that does not depend on `m`.
    pub warnings: Vec<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(text)?;

        let entry = raw.require("coefficient", "sigma")?;
        let sigma = CoefficientFn::periodic(&entry.value).map_err(|source| ConfigError::Expr {
            section: "coefficient".into(),
            key: "sigma".into(),
            line: entry.line,
            source,
        })?;

        let fast = match raw.get("fast", "kind").map(|e| (e, e.value.as_str())) {
            None | Some((_, "ou")) => {
                if let Some(e) = raw.get("fast", "drift") {
                    return Err(invalid("fast", "drift", e, "a drift is only used with kind = langevin"));
                }
                FastChoice::OrnsteinUhlenbeck
            }
            Some((_, "langevin")) => {
                let e = raw.require("fast", "drift")?;
                let drift = CoefficientFn::parse(&e.value).map_err(|source| ConfigError::Expr {
                    section: "fast".into(),
                    key: "drift".into(),
                    line: e.line,
                    source,
                })?;
                if drift.depends_on(Var::X) {
                    return Err(invalid("fast", "drift", e, "the drift V'(m) must not depend on x"));
                }
                FastChoice::Langevin { drift }
            }
            Some((e, other)) => {
                return Err(invalid("fast", "kind", e, format!("expected `ou` or `langevin`, got `{other}`")))
            }
        };
        let m0 = match raw.get("fast", "m0") {
            Some(e) => parse_f64("fast", "m0", e)?,
            None => 0.0,
        };

        let epsilons = match (raw.get("sim", "epsilon"), raw.get("sim", "epsilons")) {
            (Some(_), Some(e)) => {
                return Err(invalid("sim", "epsilons", e, "give either `epsilon` or `epsilons`, not both"))
            }
            (Some(e), None) => vec![parse_f64("sim", "epsilon", e)?],
            (None, Some(e)) => e
                .value
                .split(',')
                .map(|part| {
                    let piece = Entry {
                        value: part.trim().to_string(),
                        line: e.line,
                    };
                    parse_f64("sim", "epsilons", &piece)
                })
                .collect::<Result<Vec<_>, _>>()?,
            (None, None) => {
                return Err(ConfigError::MissingKey {
                    section: "sim".into(),
                    key: "epsilon".into(),
                })
            }
        };
        let eps_key = if epsilons.len() > 1 || raw.get("sim", "epsilons").is_some() {
            "epsilons"
        } else {
            "epsilon"
        };
        for &eps in &epsilons {
            check_eps(eps, eps_key)?;
        }
        if epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(range("sim", "epsilons", "the epsilon list must be strictly decreasing"));
        }

        let horizon = parse_f64("sim", "T", raw.require("sim", "T")?)?;
        let x0 = parse_f64("sim", "x0", raw.require("sim", "x0")?)?;
        let n_samples = parse_u64("sim", "n_samples", raw.require("sim", "n_samples")?)? as usize;
        let base_seed = parse_u64("sim", "base_seed", raw.require("sim", "base_seed")?)?;
        let h_max = match raw.get("sim", "h_max") {
            Some(e) => parse_f64("sim", "h_max", e)?,
            None => DEFAULT_H_MAX,
        };
        let coupling = match raw.get("sim", "c") {
            Some(e) => parse_f64("sim", "c", e)?,
            None => DEFAULT_COUPLING,
        };
        let phi = match raw.get("sim", "phi") {
            Some(e) => TestFunction::parse(&e.value).map_err(|source| ConfigError::Expr {
                section: "sim".into(),
                key: "phi".into(),
                line: e.line,
                source,
            })?,
            None => TestFunction::parse("m*m").expect("literal parses"),
        };

        let output_dir = raw.get("outputs", "directory").map(|e| PathBuf::from(&e.value));
        let formats = match raw.get("outputs", "formats") {
            Some(e) => {
                let mut out = Vec::new();
                for part in e.value.split(',') {
                    let f = Format::from_name(part.trim())
                        .ok_or_else(|| invalid("outputs", "formats", e, format!("unknown format `{}`", part.trim())))?;
                    if !out.contains(&f) {
                        out.push(f);
                    }
                }
                out
            }
            None => vec![Format::Csv],
        };

        let mut warnings = Vec::new();
        if sigma.is_constant_in_m().map_err(|source| ConfigError::Expr {
            section: "coefficient".into(),
            key: "sigma".into(),
            line: entry.line,
            source,
        })? {
            warnings.push(format!(
                "sigma = {} does not depend on m: the mapping sigma(x, .) is required to be non-constant, \
                 so the fluctuation part vanishes",
                sigma.source()
            ));
        }

        let cfg = Self {
            sigma,
            fast,
            m0,
            epsilons,
            horizon,
            x0,
            h_max,
            coupling,
            n_samples,
            base_seed,
            phi,
            output_dir,
            formats,
            warnings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks shared by the loader and by [`Self::apply`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_samples < 1 {
            return Err(range("sim", "n_samples", "n_samples must be at least 1"));
        }
        for &eps in &self.epsilons {
            check_eps(eps, "epsilon")?;
            self.sim_config(eps)
                .validate()
                .map_err(|e| range("sim", "T/h_max/c", e.to_string()))?;
        }
        Ok(())
    }

    /// Applies command-line overrides and revalidates.
    pub fn apply(mut self, o: &Overrides) -> Result<Self, ConfigError> {
        if let Some(eps) = o.epsilon {
            check_eps(eps, "epsilon")?;
            self.epsilons = vec![eps];
        }
        if let Some(n) = o.samples {
            if n < 1 {
                return Err(range("sim", "n_samples", "--samples must be at least 1"));
            }
            self.n_samples = n;
        }
        if let Some(seed) = o.seed {
            self.base_seed = seed;
        }
        if let Some(f) = o.format {
            self.formats = vec![f];
        }
        self.validate()?;
        Ok(self)
    }

    /// The first (largest) epsilon.
    pub fn epsilon(&self) -> f64 {
        self.epsilons[0]
    }

    pub fn sim_config(&self, eps: f64) -> SimConfig {
        let mut c = SimConfig::new(eps, self.horizon, self.x0, self.m0, self.n_samples, self.base_seed);
        c.h_max = self.h_max;
        c.coupling = self.coupling;
        c
    }

    pub fn fast_spec(&self, eps: f64) -> Result<FastProcessSpec, FastError> {
        match &self.fast {
            FastChoice::OrnsteinUhlenbeck => FastProcessSpec::ornstein_uhlenbeck(self.m0, eps),
            FastChoice::Langevin { drift } => FastProcessSpec::langevin(drift.clone(), self.m0, eps),
        }
    }

    pub fn measure(&self) -> Result<InvariantMeasure, AveragingError> {
        match &self.fast {
            FastChoice::OrnsteinUhlenbeck => InvariantMeasure::standard_gaussian(),
            FastChoice::Langevin { drift } => InvariantMeasure::gibbs_from_drift(drift),
        }
    }

    pub fn is_ou(&self) -> bool {
        matches!(self.fast, FastChoice::OrnsteinUhlenbeck)
    }

    /// One line per effective setting, in a fixed order. Output locations
    /// are left out so that moving an experiment does not change its hash.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sigma={}", self.sigma.root());
        match &self.fast {
            FastChoice::OrnsteinUhlenbeck => {
                let _ = writeln!(s, "fast=ou");
            }
            FastChoice::Langevin { drift } => {
                let _ = writeln!(s, "fast=langevin drift={}", drift.root());
            }
        }
        let _ = writeln!(s, "m0={:?}", self.m0);
        let eps: Vec<String> = self.epsilons.iter().map(|e| format!("{e:?}")).collect();
        let _ = writeln!(s, "epsilons={}", eps.join(","));
        let _ = writeln!(s, "T={:?}", self.horizon);
        let _ = writeln!(s, "x0={:?}", self.x0);
        let _ = writeln!(s, "h_max={:?}", self.h_max);
        let _ = writeln!(s, "c={:?}", self.coupling);
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "base_seed={}", self.base_seed);
        let _ = writeln!(s, "phi={}", self.phi.source());
        s
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
