//! TOML model configuration documents.
//!
//! ```toml
//! name = "moat-0"
//! num_classes = 1000
//! input_size = 224
//! mode = "classification"          # or "downstream"
//! window_plan = ["global", "global", "global", "window-14", "global"]
//! rel_bias = true
//! sd_survival = 0.8
//!
//! [[stages]]                         # exactly five, stem first
//! kind = "conv_stem"
//! blocks = 2
//! channels = 64
//!
//! [train]                            # optional, every key optional
//! peak_lr = 0.003
//! ```
//!
//! `mode`, `window_plan`, `rel_bias`, `sd_survival` and `train` may be left
//! out and default to classification, global attention everywhere, `true`,
//! `1.0` and no training section. Unknown keys are rejected.
//! [`emit_config`] writes keys in the order above with floats in shortest
//! round-trip form, so `emit(parse(emit(c))) == emit(c)` byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use moat_core::blocks::AttnWindow;
use moat_core::train::TrainConfig;
use moat_core::zoo::{ModelConfig, StageKind, StageSpec, TaskMode, NUM_STAGES};
use toml::{Table, Value};

use crate::error::{Error, Result};

const TOP_KEYS: &[&str] = &[
    "name",
    "num_classes",
    "input_size",
    "mode",
    "window_plan",
    "rel_bias",
    "sd_survival",
    "stages",
    "train",
];
const STAGE_KEYS: &[&str] = &["kind", "blocks", "channels"];
const TRAIN_KEYS: &[&str] = &[
    "peak_lr",
    "min_lr",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "label_smoothing",
    "grad_clip_norm",
    "weight_decay",
    "seed",
    "ema_decay",
];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn check_keys(table: &Table, allowed: &[&str], prefix: &str) -> Result<()> {
    match table.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::UnknownKey(format!("{prefix}{k}"))),
        None => Ok(()),
    }
}

struct Fields<'a> {
    table: &'a Table,
    prefix: String,
}

impl<'a> Fields<'a> {
    fn key(&self, k: &str) -> String {
        format!("{}{k}", self.prefix)
    }

    fn get(&self, k: &str) -> Option<&'a Value> {
        self.table.get(k)
    }

    fn req(&self, k: &str) -> Result<&'a Value> {
        self.get(k).ok_or_else(|| Error::MissingKey(self.key(k)))
    }

    fn str_of(&self, k: &str, v: &'a Value) -> Result<&'a str> {
        v.as_str().ok_or_else(|| Error::bad(self.key(k), "expected a string"))
    }

    fn usize_of(&self, k: &str, v: &Value) -> Result<usize> {
        let i = v.as_integer().ok_or_else(|| Error::bad(self.key(k), "expected an integer"))?;
        usize::try_from(i).map_err(|_| Error::bad(self.key(k), format!("{i} is negative")))
    }

    fn f64_of(&self, k: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(Error::bad(self.key(k), "expected a number")),
        }
    }

    fn bool_of(&self, k: &str, v: &Value) -> Result<bool> {
        v.as_bool().ok_or_else(|| Error::bad(self.key(k), "expected true or false"))
    }

    fn opt_usize(&self, k: &str, default: usize) -> Result<usize> {
        self.get(k).map_or(Ok(default), |v| self.usize_of(k, v))
    }

    fn opt_f64(&self, k: &str, default: f64) -> Result<f64> {
        self.get(k).map_or(Ok(default), |v| self.f64_of(k, v))
    }
}

fn parse_stage(i: usize, v: &Value) -> Result<StageSpec> {
    let prefix = format!("stages[{i}].");
    let table = v
        .as_table()
        .ok_or_else(|| Error::bad(format!("stages[{i}]"), "expected a table"))?;
    check_keys(table, STAGE_KEYS, &prefix)?;
    let f = Fields { table, prefix };
    let kind_s = f.str_of("kind", f.req("kind")?)?;
    let kind: StageKind = kind_s.parse().map_err(|e| Error::bad(f.key("kind"), format!("{e}")))?;
    Ok(StageSpec {
        kind,
        blocks: f.usize_of("blocks", f.req("blocks")?)?,
        channels: f.usize_of("channels", f.req("channels")?)?,
    })
}

fn parse_train(v: &Value) -> Result<TrainConfig> {
    let table = v.as_table().ok_or_else(|| Error::bad("train", "expected a table"))?;
    check_keys(table, TRAIN_KEYS, "train.")?;
    let f = Fields {
        table,
        prefix: "train.".into(),
    };
    let d = TrainConfig::default();
    let seed = match f.get("seed") {
        Some(v) => f.usize_of("seed", v)? as u64,
        None => d.seed,
    };
    let ema_decay = match f.get("ema_decay") {
        Some(v) => Some(f.f64_of("ema_decay", v)?),
        None => None,
    };
    Ok(TrainConfig {
        peak_lr: f.opt_f64("peak_lr", d.peak_lr)?,
        min_lr: f.opt_f64("min_lr", d.min_lr)?,
        warmup_steps: f.opt_usize("warmup_steps", d.warmup_steps)?,
        total_steps: f.opt_usize("total_steps", d.total_steps)?,
        batch_size: f.opt_usize("batch_size", d.batch_size)?,
        label_smoothing: f.opt_f64("label_smoothing", d.label_smoothing)?,
        grad_clip_norm: f.opt_f64("grad_clip_norm", d.grad_clip_norm)?,
        weight_decay: f.opt_f64("weight_decay", d.weight_decay)?,
        seed,
        ema_decay,
    })
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Syntax {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    check_keys(&table, TOP_KEYS, "")?;
    let f = Fields {
        table: &table,
        prefix: String::new(),
    };
    let name = f.str_of("name", f.req("name")?)?.to_string();
    let stages_v = f
        .req("stages")?
        .as_array()
        .ok_or_else(|| Error::bad("stages", "expected an array of tables"))?;
    let stages = stages_v
        .iter()
        .enumerate()
        .map(|(i, v)| parse_stage(i, v))
        .collect::<Result<Vec<_>>>()?;
    let mode = match f.get("mode") {
        Some(v) => f
            .str_of("mode", v)?
            .parse::<TaskMode>()
            .map_err(|e| Error::bad("mode", format!("{e}")))?,
        None => TaskMode::Classification,
    };
    let window_plan = match f.get("window_plan") {
        Some(v) => {
            let items = v.as_array().ok_or_else(|| Error::bad("window_plan", "expected an array"))?;
            items
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let key = format!("window_plan[{i}]");
                    let s = w.as_str().ok_or_else(|| Error::bad(&key, "expected a string"))?;
                    s.parse::<AttnWindow>().map_err(|e| Error::bad(&key, format!("{e}")))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![AttnWindow::Global; NUM_STAGES],
    };
    let rel_bias = match f.get("rel_bias") {
        Some(v) => f.bool_of("rel_bias", v)?,
        None => true,
    };
    let cfg = ModelConfig {
        name,
        stages,
        num_classes: f.usize_of("num_classes", f.req("num_classes")?)?,
        input_size: f.usize_of("input_size", f.req("input_size")?)?,
        mode,
        window_plan,
        rel_bias,
        sd_survival: f.opt_f64("sd_survival", 1.0)?,
        train: f.get("train").map(parse_train).transpose()?,
    };
    cfg.validate().map_err(Error::Invalid)?;
    Ok(cfg)
}

fn float(v: f64) -> String {
    // Debug gives the shortest representation that reads back exactly.
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'i', 'N']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn string(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

/// Canonical text form of a configuration.
pub fn emit_config(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    let plan: Vec<String> = cfg.window_plan.iter().map(|w| string(&w.to_string())).collect();
    let _ = writeln!(out, "name = {}", string(&cfg.name));
    let _ = writeln!(out, "num_classes = {}", cfg.num_classes);
    let _ = writeln!(out, "input_size = {}", cfg.input_size);
    let _ = writeln!(out, "mode = {}", string(cfg.mode.name()));
    let _ = writeln!(out, "window_plan = [{}]", plan.join(", "));
    let _ = writeln!(out, "rel_bias = {}", cfg.rel_bias);
    let _ = writeln!(out, "sd_survival = {}", float(cfg.sd_survival));
    for s in &cfg.stages {
        let _ = writeln!(out, "\n[[stages]]");
        let _ = writeln!(out, "kind = {}", string(s.kind.name()));
        let _ = writeln!(out, "blocks = {}", s.blocks);
        let _ = writeln!(out, "channels = {}", s.channels);
    }
    if let Some(t) = &cfg.train {
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "peak_lr = {}", float(t.peak_lr));
        let _ = writeln!(out, "min_lr = {}", float(t.min_lr));
        let _ = writeln!(out, "warmup_steps = {}", t.warmup_steps);
        let _ = writeln!(out, "total_steps = {}", t.total_steps);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "label_smoothing = {}", float(t.label_smoothing));
        let _ = writeln!(out, "grad_clip_norm = {}", float(t.grad_clip_norm));
        let _ = writeln!(out, "weight_decay = {}", float(t.weight_decay));
        let _ = writeln!(out, "seed = {}", t.seed);
        if let Some(e) = t.ema_decay {
            let _ = writeln!(out, "ema_decay = {}", float(e));
        }
    }
    out
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn save_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, emit_config(cfg)).map_err(|e| Error::io(path, e))
}
