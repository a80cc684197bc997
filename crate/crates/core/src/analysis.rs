//! Static parameter and FLOP accounting.
//!
//! One FLOP is one multiply-accumulate. Convolutions count
//! `out_h·out_w·kh·kw·cin·cout` (depthwise drops `cout`), dense layers
//! `tokens·cin·cout`, attention adds `2·L²·C` for logits and the weighted sum,
//! and every normalization, activation, pooling input, residual add, logit
//! scale, bias add and softmax element counts one (softmax counts two: exp and
//! normalize). Biases add parameters but no FLOPs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::zoo::{family_config, Architecture, StageKind, NUM_STAGES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

/// Collects rows during a walk of an architecture.
#[derive(Debug, Default, Clone)]
pub struct CostSink {
    rows: Vec<CostRow>,
}

impl CostSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&mut self, path: &str, kind: &'static str, params: usize, flops: usize) {
        self.rows.push(CostRow {
            path: path.into(),
            kind,
            params: params as u64,
            flops: flops as u64,
        });
    }

    pub fn into_rows(self) -> Vec<CostRow> {
        self.rows
    }

    pub fn rows(&self) -> &[CostRow] {
        &self.rows
    }
}

/// Per-layer parameter and FLOP rows for one image at `input_size`².
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub input_size: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn from_rows(model: &str, input_size: usize, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        CostReport {
            model: model.into(),
            input_size,
            rows,
            total_params,
            total_flops,
        }
    }

    /// Totals grouped by the first path component (`stem`, `stage2`, …, `head`).
    pub fn stage_totals(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for r in &self.rows {
            let key = r.path.split('.').next().unwrap_or("");
            match out.last_mut() {
                Some(last) if last.0 == key => {
                    last.1 += r.params;
                    last.2 += r.flops;
                }
                _ => out.push((key.into(), r.params, r.flops)),
            }
        }
        out
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_b(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

pub fn cost_report(arch: &Architecture, input_size: usize) -> Result<CostReport> {
    let mut sink = CostSink::new();
    arch.cost(&mut sink, input_size)?;
    Ok(CostReport::from_rows(&arch.config.name, input_size, sink.into_rows()))
}

/// Trainable scalar count (running statistics excluded).
pub fn count_params(arch: &Architecture) -> u64 {
    arch.specs
        .iter()
        .filter(|s| s.role.trainable())
        .map(|s| s.numel() as u64)
        .sum()
}

pub fn count_flops(arch: &Architecture, input_size: usize) -> Result<u64> {
    Ok(cost_report(arch, input_size)?.total_flops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// Block composition used in the last two stages.
    Block,
    /// Order of MBConv and attention, and where downsampling/expansion happen.
    Order,
    /// Downsampling layer in front of attention.
    Downsample,
    /// Which of stages 2–5 use MOAT blocks.
    Stage,
    /// Block counts of stages 3 and 4.
    Meta,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 5] = [
        AblationSuite::Block,
        AblationSuite::Order,
        AblationSuite::Downsample,
        AblationSuite::Stage,
        AblationSuite::Meta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::Block => "block",
            AblationSuite::Order => "order",
            AblationSuite::Downsample => "downsample",
            AblationSuite::Stage => "stage",
            AblationSuite::Meta => "meta",
        }
    }

    /// Layout the published table uses by default.
    pub fn default_layout(self) -> &'static str {
        match self {
            AblationSuite::Meta => "moat-1",
            _ => "moat-0",
        }
    }
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationSuite::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation suite {s:?} (block, order, downsample, stage, meta)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: u64,
    pub flops: u64,
    /// Published params (M) and FLOPs (B) at 224², where the table has them.
    pub reference: Option<(f64, f64)>,
}

impl AblationRow {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_b(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub layout: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Pairs whose published params differ must keep their order; ties in the
    /// published column place no constraint. Returns the offending pairs.
    pub fn ranking_violations(&self) -> Vec<(String, String)> {
        let mut bad = Vec::new();
        for a in &self.rows {
            for b in &self.rows {
                if let (Some((ra, _)), Some((rb, _))) = (a.reference, b.reference) {
                    if ra < rb && a.params >= b.params {
                        bad.push((a.variant.clone(), b.variant.clone()));
                    }
                }
            }
        }
        bad
    }
}

type Variant = (&'static str, [StageKind; NUM_STAGES], Option<[usize; NUM_STAGES]>);

const MB: StageKind = StageKind::Block(BlockKind::MbConv);
const MO: StageKind = StageKind::Block(BlockKind::Moat);
const STEM: StageKind = StageKind::ConvStem;

const fn last_two(k: BlockKind) -> [StageKind; NUM_STAGES] {
    [STEM, MB, MB, StageKind::Block(k), StageKind::Block(k)]
}

fn variants(suite: AblationSuite) -> Vec<Variant> {
    use BlockKind::*;
    match suite {
        AblationSuite::Block => vec![
            ("attn+mlp", last_two(Transformer), None),
            ("attn+mlp(dwconv)", last_two(AttnMlpDwconv), None),
            ("attn+mbconv", last_two(AttnMbconv), None),
            ("mbconv+attn", last_two(Moat), None),
        ],
        AblationSuite::Order => vec![
            ("attn+mlp", last_two(Transformer), None),
            ("attn+mbconv (down@attn, expand@attn)", last_two(AttnMbconv), None),
            ("attn+mbconv (down@mbconv, expand@mbconv)", last_two(AttnMbconvDownfirst), None),
            ("mbconv+attn", last_two(Moat), None),
            ("attn+mbconv (down@mbconv, expand@attn)", last_two(AttnMbconvExpandAtAttn), None),
        ],
        AblationSuite::Downsample => vec![
            ("avgpool+attn+mlp", last_two(AvgpoolAttnMlp), None),
            ("patchembed+attn+mlp", last_two(PatchembedAttnMlp), None),
            ("mbconv+attn", last_two(Moat), None),
        ],
        AblationSuite::Stage => vec![
            ("moat,moat,moat,moat", [STEM, MO, MO, MO, MO], None),
            ("mbconv,moat,moat,moat", [STEM, MB, MO, MO, MO], None),
            ("mbconv,mbconv,moat,moat", [STEM, MB, MB, MO, MO], None),
            ("mbconv,mbconv,mbconv,moat", [STEM, MB, MB, MB, MO], None),
            ("mbconv,mbconv,mbconv,mbconv", [STEM, MB, MB, MB, MB], None),
        ],
        AblationSuite::Meta => [[2, 2, 2, 16, 2], [2, 2, 4, 15, 2], [2, 2, 6, 14, 2], [2, 2, 8, 13, 2], [2, 2, 10, 12, 2]]
            .iter()
            .map(|b| {
                let name: &'static str = match b[2] {
                    2 => "(2,2,2,16,2)",
                    4 => "(2,2,4,15,2)",
                    6 => "(2,2,6,14,2)",
                    8 => "(2,2,8,13,2)",
                    _ => "(2,2,10,12,2)",
                };
                (name, [STEM, MB, MB, MO, MO], Some(*b))
            })
            .collect(),
    }
}

/// Published params (M) / FLOPs (B) per suite, layout and variant row.
fn reference(suite: AblationSuite, layout: &str) -> Option<&'static [Option<(f64, f64)>]> {
    Some(match (suite, layout) {
        (AblationSuite::Block, "moat-0") => &[Some((28.0, 5.4)), Some((28.2, 5.4)), Some((28.2, 5.4)), Some((27.8, 5.7))],
        (AblationSuite::Block, "tiny-moat-2") => &[Some((9.8, 2.2)), None, None, Some((9.8, 2.3))],
        (AblationSuite::Block, "tiny-moat-1") => &[Some((5.1, 1.1)), None, None, Some((5.1, 1.2))],
        (AblationSuite::Block, "tiny-moat-0") => &[Some((3.3, 0.8)), None, None, Some((3.4, 0.8))],
        (AblationSuite::Order, "moat-0") => &[Some((28.0, 5.4)), Some((28.2, 5.4)), Some((25.6, 5.8)), Some((27.8, 5.7)), Some((29.3, 7.1))],
        (AblationSuite::Order, "tiny-moat-2") => &[Some((9.8, 2.2)), Some((9.9, 2.2)), Some((9.0, 2.3)), Some((9.8, 2.3)), Some((10.3, 2.8))],
        (AblationSuite::Downsample, "moat-0") => &[Some((28.0, 5.4)), Some((30.2, 5.6)), Some((27.8, 5.7))],
        (AblationSuite::Stage, "moat-0") => &[Some((28.2, 11.9)), Some((28.1, 6.9)), Some((27.8, 5.7)), Some((25.7, 4.7)), Some((23.4, 4.5))],
        (AblationSuite::Meta, "moat-1") => &[Some((43.7, 8.9)), Some((42.6, 9.0)), Some((41.6, 9.1)), Some((40.6, 9.2)), Some((39.5, 9.3))],
        _ => return None,
    })
}

/// Params and FLOPs at 224² for every variant of `suite` on a family layout.
pub fn ablation_cost_table(suite: AblationSuite, layout: &str) -> Result<AblationTable> {
    let base = family_config(layout)?;
    let refs = reference(suite, layout);
    let mut rows = Vec::new();
    for (i, (name, kinds, blocks)) in variants(suite).into_iter().enumerate() {
        let mut cfg = base.clone();
        for (s, k) in cfg.stages.iter_mut().zip(kinds) {
            s.kind = k;
        }
        if let Some(b) = blocks {
            for (s, n) in cfg.stages.iter_mut().zip(b) {
                s.blocks = n;
            }
        }
        let arch = Architecture::build(&cfg)?;
        let report = cost_report(&arch, base.input_size)?;
        let reference = refs.and_then(|r| r[i]);
        rows.push(AblationRow {
            variant: name.into(),
            params: count_params(&arch),
            flops: report.total_flops,
            reference,
        });
    }
    // The tiny block tables only list the two end rows.
    if suite == AblationSuite::Block && layout != "moat-0" {
        rows.retain(|r| r.variant == "attn+mlp" || r.variant == "mbconv+attn");
    }
    Ok(AblationTable {
        suite,
        layout: layout.into(),
        rows,
    })
}
