//! Five-stage meta-architecture: convolutional stem, MBConv stages, MOAT
//! stages and a classification head, plus the named family members.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::analysis::CostSink;
use crate::autodiff::Var;
use crate::blocks::{AttnWindow, Block, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::nn::layers::gelu_cost;
use crate::nn::{BatchNorm, Conv2d, Ctx, Dense, Hw, ParamBuilder, ParamId, ParamSpec, ParamStore, HEAD_DIM};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::train::TrainConfig;

pub const NUM_STAGES: usize = 5;
pub const STEM_BLOCKS: usize = 2;
pub const OUTPUT_STRIDES: [usize; NUM_STAGES] = [2, 4, 8, 16, 32];

pub const FAMILY: [&str; 9] = [
    "moat-0",
    "moat-1",
    "moat-2",
    "moat-3",
    "moat-4",
    "tiny-moat-0",
    "tiny-moat-1",
    "tiny-moat-2",
    "tiny-moat-3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    ConvStem,
    Block(BlockKind),
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::ConvStem => "conv_stem",
            StageKind::Block(k) => k.name(),
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, StageKind::Block(k) if k.has_attention())
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "conv_stem" {
            Ok(StageKind::ConvStem)
        } else {
            s.parse().map(StageKind::Block)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Classification,
    Downstream,
}

impl TaskMode {
    pub fn name(self) -> &'static str {
        match self {
            TaskMode::Classification => "classification",
            TaskMode::Downstream => "downstream",
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskMode::Classification),
            "downstream" => Ok(TaskMode::Downstream),
            _ => Err(Error::config(format!("unknown mode {s:?} (expected classification or downstream)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub input_size: usize,
    pub mode: TaskMode,
    pub window_plan: Vec<AttnWindow>,
    pub rel_bias: bool,
    /// Survival probability of the last block; earlier blocks ramp up to 1.
    pub sd_survival: f64,
    pub train: Option<TrainConfig>,
}

fn layout(
    name: &str,
    kinds: [StageKind; NUM_STAGES],
    blocks: [usize; NUM_STAGES],
    channels: [usize; NUM_STAGES],
    survival: f64,
) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        stages: (0..NUM_STAGES)
            .map(|i| StageSpec {
                kind: kinds[i],
                blocks: blocks[i],
                channels: channels[i],
            })
            .collect(),
        num_classes: 1000,
        input_size: 224,
        mode: TaskMode::Classification,
        window_plan: vec![AttnWindow::Global; NUM_STAGES],
        rel_bias: true,
        sd_survival: survival,
        train: None,
    }
}

pub const MOAT_KINDS: [StageKind; NUM_STAGES] = [
    StageKind::ConvStem,
    StageKind::Block(BlockKind::MbConv),
    StageKind::Block(BlockKind::MbConv),
    StageKind::Block(BlockKind::Moat),
    StageKind::Block(BlockKind::Moat),
];

/// The named family members with their block counts and channel widths.
pub fn family_config(name: &str) -> Result<ModelConfig> {
    let (blocks, channels, survival) = match name {
        "moat-0" => ([2, 2, 3, 7, 2], [64, 96, 192, 384, 768], 0.8),
        "moat-1" => ([2, 2, 6, 14, 2], [64, 96, 192, 384, 768], 0.7),
        "moat-2" => ([2, 2, 6, 14, 2], [128, 128, 256, 512, 1024], 0.5),
        "moat-3" => ([2, 2, 12, 28, 2], [160, 160, 320, 640, 1280], 0.3),
        "moat-4" => ([2, 2, 12, 28, 2], [256, 256, 512, 1024, 2048], 0.3),
        "tiny-moat-0" => ([2, 2, 3, 7, 2], [32, 32, 64, 128, 256], 1.0),
        "tiny-moat-1" => ([2, 2, 3, 7, 2], [40, 40, 80, 160, 320], 1.0),
        "tiny-moat-2" => ([2, 2, 3, 7, 2], [56, 56, 112, 224, 448], 1.0),
        "tiny-moat-3" => ([2, 2, 3, 7, 2], [80, 80, 160, 320, 640], 0.9),
        _ => {
            return Err(Error::config(format!(
                "unknown model {name:?} (known: {})",
                FAMILY.join(", ")
            )))
        }
    };
    Ok(layout(name, MOAT_KINDS, blocks, channels, survival))
}

/// Small layout for tests and desk-scale training: two stem convolutions and
/// one block in each later stage.
pub fn micro_config(channels: [usize; NUM_STAGES], input_size: usize, num_classes: usize) -> ModelConfig {
    let mut cfg = layout("micro-moat", MOAT_KINDS, [STEM_BLOCKS, 1, 1, 1, 1], channels, 1.0);
    cfg.input_size = input_size;
    cfg.num_classes = num_classes;
    cfg
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::config(format!("expected {NUM_STAGES} stages, got {}", self.stages.len())));
        }
        if self.window_plan.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "window_plan needs {NUM_STAGES} entries, got {}",
                self.window_plan.len()
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let sn = i + 1;
            match (i, st.kind) {
                (0, StageKind::ConvStem) => {
                    if st.blocks != STEM_BLOCKS {
                        return Err(Error::config(format!(
                            "stage {sn}: the convolutional stem has exactly {STEM_BLOCKS} convolutions, got blocks = {}",
                            st.blocks
                        )));
                    }
                }
                (0, k) => return Err(Error::config(format!("stage 1 must be conv_stem, got {k}"))),
                (_, StageKind::ConvStem) => {
                    return Err(Error::config(format!("stage {sn}: conv_stem is only allowed as stage 1")))
                }
                _ => {}
            }
            if st.blocks == 0 {
                return Err(Error::config(format!("stage {sn}: blocks must be at least 1")));
            }
            if st.channels == 0 {
                return Err(Error::config(format!("stage {sn}: channels must be positive")));
            }
            if st.kind.has_attention() && st.channels % HEAD_DIM != 0 {
                return Err(Error::config(format!(
                    "stage {sn}: {} channels {} not divisible by {HEAD_DIM} (each attention head has {HEAD_DIM} channels)",
                    st.kind, st.channels
                )));
            }
            if let AttnWindow::Window(k) = self.window_plan[i] {
                if !st.kind.has_attention() {
                    return Err(Error::config(format!("stage {sn}: window-{k} given for a stage without attention")));
                }
                let feat = self.input_size / OUTPUT_STRIDES[i];
                if !feat.is_multiple_of(k) {
                    return Err(Error::config(format!(
                        "stage {sn}: feature map {feat}x{feat} is not divisible by window {k}; input size must be a multiple of {}",
                        OUTPUT_STRIDES[i] * k
                    )));
                }
            }
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(OUTPUT_STRIDES[NUM_STAGES - 1]) {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                OUTPUT_STRIDES[NUM_STAGES - 1]
            )));
        }
        if !(self.sd_survival > 0.0 && self.sd_survival <= 1.0) {
            return Err(Error::config(format!("sd_survival {} outside (0, 1]", self.sd_survival)));
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Block specs for stages 2–5 with strides and the survival ramp applied.
    pub fn block_specs(&self) -> Vec<(usize, BlockSpec)> {
        let total: usize = self.stages[1..].iter().map(|s| s.blocks).sum();
        let mut out = Vec::with_capacity(total);
        let mut c_in = self.stages[0].channels;
        for (i, st) in self.stages.iter().enumerate().skip(1) {
            let StageKind::Block(kind) = st.kind else { continue };
            for b in 0..st.blocks {
                let idx = out.len();
                let frac = if total > 1 { idx as f64 / (total - 1) as f64 } else { 1.0 };
                let mut spec = BlockSpec::new(kind, c_in, st.channels, if b == 0 { 2 } else { 1 });
                spec.window = self.window_plan[i];
                spec.rel_bias = self.rel_bias;
                spec.sd_survival = 1.0 - (1.0 - self.sd_survival) * frac;
                out.push((i, spec));
                c_in = st.channels;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv1: Conv2d,
    pub norm: BatchNorm,
    pub conv2: Conv2d,
}

impl Stem {
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.tape.gelu(y);
        self.conv2.forward(cx, y)
    }

    fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        let hw = self.conv1.cost(sink, input);
        self.norm.cost(sink, hw);
        gelu_cost(sink, "stem.act", hw, self.conv1.cout);
        self.conv2.cost(sink, hw)
    }
}

#[derive(Debug, Clone)]
pub struct StagedBlock {
    /// Zero-based stage index (1..=4).
    pub stage: usize,
    pub block: Block,
}

/// Layer structure and parameter declarations, without weights.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stem: Stem,
    pub blocks: Vec<StagedBlock>,
    pub head: Dense,
    pub specs: Vec<ParamSpec>,
}

impl Architecture {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let c1 = config.stages[0].channels;
        let stem = Stem {
            conv1: Conv2d::declare(&mut pb, "stem.conv1", 3, 3, c1, 2, false)?,
            norm: BatchNorm::declare(&mut pb, "stem.norm", c1)?,
            conv2: Conv2d::declare(&mut pb, "stem.conv2", 3, c1, c1, 1, true)?,
        };
        let mut hw = Hw::square(config.input_size).strided(2);
        let mut blocks = Vec::new();
        let mut counter = [0usize; NUM_STAGES];
        for (stage, spec) in config.block_specs() {
            let path = format!("stage{}.block{}", stage + 1, counter[stage]);
            counter[stage] += 1;
            let block = Block::build(&mut pb, &path, spec, hw)
                .map_err(|e| Error::config(format!("stage {}: {e}", stage + 1)))?;
            hw = block.output();
            blocks.push(StagedBlock { stage, block });
        }
        let c5 = config.stages[NUM_STAGES - 1].channels;
        let head = Dense::declare(&mut pb, "head", c5, config.num_classes, true)?;
        Ok(Architecture {
            config: config.clone(),
            stem,
            blocks,
            head,
            specs: pb.into_specs(),
        })
    }

    /// Walks every layer for one `input_size`² image.
    pub fn cost(&self, sink: &mut CostSink, input_size: usize) -> Result<()> {
        if input_size == 0 || !input_size.is_multiple_of(OUTPUT_STRIDES[NUM_STAGES - 1]) {
            return Err(Error::config(format!(
                "input size {input_size} must be a positive multiple of {}",
                OUTPUT_STRIDES[NUM_STAGES - 1]
            )));
        }
        for sb in &self.blocks {
            if let Some(a) = sb.block.attention() {
                if let Some(k) = a.window {
                    let feat = input_size / OUTPUT_STRIDES[sb.stage];
                    if !feat.is_multiple_of(k) {
                        return Err(Error::config(format!(
                            "stage {}: feature map {feat} not divisible by window {k}",
                            sb.stage + 1
                        )));
                    }
                }
            }
        }
        let mut hw = self.stem.cost(sink, Hw::square(input_size));
        for sb in &self.blocks {
            hw = sb.block.cost(sink, hw);
        }
        let c5 = self.head.cin;
        sink.row("head.pool", "pool", 0, hw.area() * c5);
        self.head.cost(sink, 1);
        Ok(())
    }

    /// Per-stage feature maps (stem output first).
    pub fn features<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let s = cx.shape(x).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::dim("model input", &s, &[3]));
        }
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut y = self.stem.forward(cx, x)?;
        let record = |cx: &mut Ctx<'_, T>, stage: usize, y: Var| {
            let shape = cx.shape(y).to_vec();
            cx.record(&format!("stage{}", stage + 1), "stage_out", &shape);
        };
        record(cx, 0, y);
        feats.push(y);
        for stage in 1..NUM_STAGES {
            for b in self.stage_blocks(stage) {
                y = b.forward(cx, y)?;
            }
            record(cx, stage, y);
            feats.push(y);
        }
        Ok(feats)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let feats = self.features(cx, x)?;
        let last = feats[NUM_STAGES - 1];
        let n = cx.shape(last)[0];
        let pooled = cx.tape.mean(last, &[1, 2])?;
        let pooled = cx.tape.reshape(pooled, &[n, self.head.cin])?;
        self.head.forward(cx, pooled)
    }

    pub fn stage_blocks(&self, stage: usize) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(move |b| b.stage == stage).map(|b| &b.block)
    }

    pub fn rel_bias_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .filter_map(|b| b.block.rel_bias())
            .map(|id| self.specs[id.0].name.clone())
            .collect()
    }
}

/// An architecture together with its weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes from the `Init` stream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::build(config)?;
        let mut rng = stream(seed, Stream::Init);
        let store = ParamStore::materialize(&arch.specs, &mut rng);
        Ok(Model { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Per-stage feature maps (stem output first).
    pub fn features(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.arch.features(cx, x)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.arch.forward(cx, x)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.id(name)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }
}

/// Result of converting a model for large-input downstream use.
#[derive(Debug, Clone)]
pub struct Adapted<T> {
    pub model: Model<T>,
    /// Tensors of the source model with no counterpart (the bias tables).
    pub dropped: Vec<String>,
}

/// Switches to downstream mode: relative bias tables are removed, attention
/// follows `window_plan`, and every surviving tensor is copied unchanged.
pub fn adapt_downstream<T: Real>(
    model: &Model<T>,
    window_plan: Vec<AttnWindow>,
    input_size: usize,
) -> Result<Adapted<T>> {
    let mut cfg = model.config().clone();
    cfg.mode = TaskMode::Downstream;
    cfg.rel_bias = false;
    cfg.window_plan = window_plan;
    cfg.input_size = input_size;
    let arch = Architecture::build(&cfg)?;
    let mut named = Vec::with_capacity(arch.specs.len());
    for spec in &arch.specs {
        let e = model
            .store
            .get(&spec.name)
            .ok_or_else(|| Error::UnknownParam(spec.name.clone()))?;
        named.push((*e.value).clone());
    }
    let store = ParamStore::with_values(&arch.specs, named)?;
    let dropped = model
        .store
        .entries()
        .iter()
        .map(|e| e.spec.name.clone())
        .filter(|n| store.id(n).is_none())
        .collect();
    Ok(Adapted {
        model: Model { arch, store },
        dropped,
    })
}

/// Standard downstream plan: window attention in stage 4, global in stage 5.
pub fn downstream_plan(window: usize) -> Vec<AttnWindow> {
    vec![
        AttnWindow::Global,
        AttnWindow::Global,
        AttnWindow::Global,
        AttnWindow::Window(window),
        AttnWindow::Global,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    /// `(name, total blocks, last-stage channels)`.
    pub rows: Vec<(String, usize, usize)>,
    pub violations: Vec<String>,
}

impl ScaleReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Depth and width never shrink along the sequence, and each step grows at
/// least one of them.
pub fn scale_family_check(cfgs: &[ModelConfig]) -> Result<ScaleReport> {
    if cfgs.len() < 2 {
        return Err(Error::config("scale check needs at least two configs"));
    }
    let rows: Vec<_> = cfgs.iter().map(|c| (c.name.clone(), c.depth(), c.width())).collect();
    let mut violations = Vec::new();
    for w in rows.windows(2) {
        let ((a, da, wa), (b, db, wb)) = (&w[0], &w[1]);
        if db < da {
            violations.push(format!("{a} -> {b}: depth shrinks {da} -> {db}"));
        }
        if wb < wa {
            violations.push(format!("{a} -> {b}: width shrinks {wa} -> {wb}"));
        }
        if db == da && wb == wa {
            violations.push(format!("{a} -> {b}: neither depth nor width grows"));
        }
    }
    Ok(ScaleReport { rows, violations })
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<String> = self.stages.iter().map(|s| s.blocks.to_string()).collect();
        let chans: Vec<String> = self.stages.iter().map(|s| s.channels.to_string()).collect();
        write!(f, "{} blocks ({}) channels ({})", self.name, blocks.join(","), chans.join(","))
    }
}
