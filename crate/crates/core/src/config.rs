//! Plain-text experiment configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys not listed
//! in the file keep their defaults. The data layout is either a ring
//! (`contexts`, `modes_per_context`, `ring_radius`, `ring_rotation`) or
//! explicit centers:
//!
//! ```text
//! mode_centers = 0,0 3,0 | 0,3 3,3
//! ```
//!
//! where `|` separates contexts and each `x,y` is one mode center.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{ConditionalMixtureSpec, Point};
use crate::error::{Error, Result};
use crate::training::{PairMode, TrainConfig};

/// Environment variable consulted when the config has no `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "MSLAB_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq)]
pub enum DataLayout {
    Ring {
        contexts: usize,
        modes: usize,
        radius: f64,
        /// Rotation between consecutive contexts, in radians.
        rotation: f64,
    },
    Explicit(Vec<Vec<Point>>),
}

impl Default for DataLayout {
    fn default() -> Self {
        DataLayout::Ring {
            contexts: 4,
            modes: 8,
            radius: 2.0,
            rotation: PI / 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub layout: DataLayout,
    pub mode_sigma: f64,
    pub output_dir: Option<PathBuf>,
    pub run_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            layout: DataLayout::default(),
            mode_sigma: 0.02,
            output_dir: None,
            run_name: None,
        }
    }
}

const RING_KEYS: [&str; 4] = ["contexts", "modes_per_context", "ring_radius", "ring_rotation"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates a config file's contents.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        let mut line_of = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                key: content.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    msg: "duplicate key".into(),
                });
            }
            if key == "mode_centers" && RING_KEYS.iter().any(|k| seen.contains(*k))
                || RING_KEYS.contains(&key) && seen.contains("mode_centers")
            {
                return Err(Error::Config {
                    line,
                    key: key.into(),
                    msg: "ring keys and mode_centers are mutually exclusive".into(),
                });
            }
            cfg.apply(key, value).map_err(|msg| Error::Config {
                line,
                key: key.into(),
                msg,
            })?;
            line_of.push((key.to_string(), line));
        }
        cfg.validate().map_err(|e| {
            // attribute cross-field failures to the last key the message names
            let (key, line) = line_of
                .iter()
                .rev()
                .find(|(k, _)| e.to_string().contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            Error::Config {
                line,
                key,
                msg: e.to_string(),
            }
        })?;
        Ok(cfg)
    }

    /// Sets one key as if it appeared in the file, then re-validates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        if key == "mode_centers" {
            next.layout = DataLayout::Explicit(Vec::new());
        } else if RING_KEYS.contains(&key) && matches!(next.layout, DataLayout::Explicit(_)) {
            next.layout = DataLayout::default();
        }
        let err = |msg: String| Error::Config {
            line: 0,
            key: key.into(),
            msg,
        };
        next.apply(key, value).map_err(err)?;
        next.validate().map_err(|e| err(e.to_string()))?;
        *self = next;
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let w = &mut t.loss_weights;
        let d = &mut t.dims;
        match key {
            "contexts" | "modes_per_context" | "ring_radius" | "ring_rotation" => {
                if let DataLayout::Explicit(_) = self.layout {
                    self.layout = DataLayout::default();
                }
                let DataLayout::Ring {
                    contexts,
                    modes,
                    radius,
                    rotation,
                } = &mut self.layout
                else {
                    unreachable!()
                };
                match key {
                    "contexts" => *contexts = positive(value)?,
                    "modes_per_context" => *modes = positive(value)?,
                    "ring_radius" => *radius = positive_f64(value)?,
                    _ => *rotation = finite(value)?,
                }
            }
            "mode_centers" => self.layout = DataLayout::Explicit(parse_centers(value)?),
            "mode_sigma" => self.mode_sigma = positive_f64(value)?,
            "noise_dim" => d.noise_dim = positive(value)?,
            "sentence_dim" => d.sentence_dim = positive(value)?,
            "word_dim" => d.word_dim = positive(value)?,
            "num_words" => d.num_words = positive(value)?,
            "feature_dim" => d.feature_dim = positive(value)?,
            "memory_dim" => d.memory_dim = positive(value)?,
            "hidden_width" => d.hidden_width = positive(value)?,
            "num_stages" => {
                d.num_stages = positive(value)?;
                if d.num_stages > 2 {
                    return Err("must be 1 or 2".into());
                }
            }
            "lambda1" => w.lambda1 = non_negative(value)?,
            "lambda2" => w.lambda2 = non_negative(value)?,
            "lambda_ms" => w.lambda_ms = non_negative(value)?,
            "epsilon_ms" => w.epsilon_ms = positive_f64(value)?,
            "matching_tau" => t.matching_tau = positive_f64(value)?,
            "epochs" => t.epochs = number(value)?,
            "steps_per_epoch" => t.steps_per_epoch = positive(value)?,
            "batch_size" => {
                t.batch_size = number(value)?;
                if t.batch_size < 2 {
                    return Err(format!("must be at least 2, got {}", t.batch_size));
                }
            }
            "lr" => t.lr = positive_f64(value)?,
            "beta1" => t.beta1 = unit(value)?,
            "beta2" => t.beta2 = unit(value)?,
            "seed" => t.seed = number(value)?,
            "eval_every" => t.eval_every = positive(value)?,
            "n_eval" => {
                t.n_eval = number(value)?;
                if t.n_eval < 4 {
                    return Err(format!("must be at least 4, got {}", t.n_eval));
                }
            }
            "ms_pairs" => t.pair_mode = value.parse::<PairMode>()?,
            "output_dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "run_name" => {
                if value.contains(['/', '\\']) || value == "." || value == ".." {
                    return Err(format!("`{value}` is not a plain directory name"));
                }
                self.run_name = (!value.is_empty()).then(|| value.to_string());
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.mode_sigma > 0.0 && self.mode_sigma.is_finite()) {
            return Err(Error::Contract(format!("mode_sigma must be positive, got {}", self.mode_sigma)));
        }
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<ConditionalMixtureSpec> {
        match &self.layout {
            DataLayout::Ring {
                contexts,
                modes,
                radius,
                rotation,
            } => ConditionalMixtureSpec::ring(*contexts, *modes, *radius, *rotation, self.mode_sigma),
            DataLayout::Explicit(centers) => ConditionalMixtureSpec::new(centers.clone(), self.mode_sigma),
        }
    }

    /// `output_dir`, else the environment override, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    /// Serializes every key. Parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.loss_weights;
        let d = &t.dims;
        let mut s = String::new();
        s.push_str("# data\n");
        match &self.layout {
            DataLayout::Ring {
                contexts,
                modes,
                radius,
                rotation,
            } => {
                let _ = writeln!(s, "contexts = {contexts}");
                let _ = writeln!(s, "modes_per_context = {modes}");
                let _ = writeln!(s, "ring_radius = {radius}");
                let _ = writeln!(s, "ring_rotation = {rotation}");
            }
            DataLayout::Explicit(centers) => {
                let ctx: Vec<String> = centers
                    .iter()
                    .map(|c| c.iter().map(|p| format!("{},{}", p[0], p[1])).collect::<Vec<_>>().join(" "))
                    .collect();
                let _ = writeln!(s, "mode_centers = {}", ctx.join(" | "));
            }
        }
        let _ = writeln!(s, "mode_sigma = {}", self.mode_sigma);
        s.push_str("\n# model\n");
        for (k, v) in [
            ("noise_dim", d.noise_dim),
            ("sentence_dim", d.sentence_dim),
            ("word_dim", d.word_dim),
            ("num_words", d.num_words),
            ("feature_dim", d.feature_dim),
            ("memory_dim", d.memory_dim),
            ("hidden_width", d.hidden_width),
            ("num_stages", d.num_stages),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n# objective\n");
        for (k, v) in [
            ("lambda1", w.lambda1),
            ("lambda2", w.lambda2),
            ("lambda_ms", w.lambda_ms),
            ("epsilon_ms", w.epsilon_ms),
            ("matching_tau", t.matching_tau),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "ms_pairs = {}", t.pair_mode);
        s.push_str("\n# schedule\n");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", t.steps_per_epoch);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "n_eval = {}", t.n_eval);
        if self.output_dir.is_some() || self.run_name.is_some() {
            s.push_str("\n# output\n");
        }
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", dir.display());
        }
        if let Some(name) = &self.run_name {
            let _ = writeln!(s, "run_name = {name}");
        }
        s
    }
}

fn number<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    let n: usize = number(v)?;
    if n == 0 {
        return Err("must be positive".into());
    }
    Ok(n)
}

fn finite(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = number(v)?;
    if !x.is_finite() {
        return Err(format!("`{v}` is not finite"));
    }
    Ok(x)
}

fn positive_f64(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if x <= 0.0 {
        return Err(format!("must be positive, got {x}"));
    }
    Ok(x)
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if x < 0.0 {
        return Err(format!("must be >= 0, got {x}"));
    }
    Ok(x)
}

fn unit(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if !(0.0..1.0).contains(&x) {
        return Err(format!("must be in [0, 1), got {x}"));
    }
    Ok(x)
}

fn parse_centers(v: &str) -> std::result::Result<Vec<Vec<Point>>, String> {
    v.split('|')
        .map(|ctx| {
            ctx.split_whitespace()
                .map(|pair| {
                    let (x, y) = pair
                        .split_once(',')
                        .ok_or_else(|| format!("`{pair}` is not an `x,y` point"))?;
                    Ok([finite(x)?, finite(y)?])
                })
                .collect()
        })
        .collect()
}
