//! MBConv, Transformer and MOAT blocks plus the ablation variants, behind a
//! uniform `Tensor -> Tensor` interface.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::analysis::CostSink;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::attention::{MultiHeadAttention, HEAD_DIM};
use crate::nn::layers::{elementwise_cost, gelu_cost, pool2, pool_cost};
use crate::nn::{BatchNorm, Conv2d, Ctx, DepthwiseConv2d, Hw, LayerNorm, ParamBuilder, ParamId, SqueezeExcite};
use crate::real::Real;

pub const EXPANSION: usize = 4;
pub const SE_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    MbConv,
    Transformer,
    Moat,
    AttnMlpDwconv,
    AttnMbconv,
    AttnMbconvDownfirst,
    AttnMbconvExpandAtAttn,
    AvgpoolAttnMlp,
    PatchembedAttnMlp,
}

impl BlockKind {
    pub const ALL: [BlockKind; 9] = [
        BlockKind::MbConv,
        BlockKind::Transformer,
        BlockKind::Moat,
        BlockKind::AttnMlpDwconv,
        BlockKind::AttnMbconv,
        BlockKind::AttnMbconvDownfirst,
        BlockKind::AttnMbconvExpandAtAttn,
        BlockKind::AvgpoolAttnMlp,
        BlockKind::PatchembedAttnMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::MbConv => "mbconv",
            BlockKind::Transformer => "transformer",
            BlockKind::Moat => "moat",
            BlockKind::AttnMlpDwconv => "attn_mlp_dwconv",
            BlockKind::AttnMbconv => "attn_mbconv",
            BlockKind::AttnMbconvDownfirst => "attn_mbconv_downfirst",
            BlockKind::AttnMbconvExpandAtAttn => "attn_mbconv_expand_at_attn",
            BlockKind::AvgpoolAttnMlp => "avgpool_attn_mlp",
            BlockKind::PatchembedAttnMlp => "patchembed_attn_mlp",
        }
    }

    pub fn has_attention(self) -> bool {
        self != BlockKind::MbConv
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown block kind {s:?}")))
    }
}

/// Attention extent: the whole feature map or non-overlapping `k×k` windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnWindow {
    Global,
    Window(usize),
}

impl AttnWindow {
    pub fn size(self) -> Option<usize> {
        match self {
            AttnWindow::Global => None,
            AttnWindow::Window(k) => Some(k),
        }
    }
}

impl fmt::Display for AttnWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnWindow::Global => f.write_str("global"),
            AttnWindow::Window(k) => write!(f, "window-{k}"),
        }
    }
}

impl FromStr for AttnWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(AttnWindow::Global);
        }
        s.strip_prefix("window-")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k > 0)
            .map(AttnWindow::Window)
            .ok_or_else(|| Error::config(format!("bad attention window {s:?} (expected global or window-<k>)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub expansion: usize,
    pub use_se: bool,
    pub window: AttnWindow,
    pub rel_bias: bool,
    pub sd_survival: f64,
    /// MOAT only: keep the residual around the attention sublayer.
    pub inner_residual: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            c_in,
            c_out,
            stride,
            expansion: EXPANSION,
            use_se: kind == BlockKind::MbConv,
            window: AttnWindow::Global,
            rel_bias: true,
            sd_survival: 1.0,
            inner_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!("block stride {} (expected 1 or 2)", self.stride)));
        }
        if self.expansion != EXPANSION {
            return Err(Error::config(format!("expansion ratio {} (fixed at {EXPANSION})", self.expansion)));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config("block channels must be positive"));
        }
        if self.kind.has_attention() && !self.c_out.is_multiple_of(HEAD_DIM) {
            return Err(Error::config(format!(
                "{} block output channels {} must be divisible by {HEAD_DIM} (each attention head has {HEAD_DIM} channels)",
                self.kind, self.c_out
            )));
        }
        if !(self.sd_survival > 0.0 && self.sd_survival <= 1.0) {
            return Err(Error::config(format!("survival probability {} outside (0, 1]", self.sd_survival)));
        }
        Ok(())
    }
}

/// Pooled and/or projected residual path used whenever a block changes shape.
#[derive(Debug, Clone)]
pub struct Shortcut {
    pub pool: bool,
    pub proj: Option<Conv2d>,
}

impl Shortcut {
    fn declare(pb: &mut ParamBuilder, path: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let proj = if stride == 2 || c_in != c_out {
            Some(Conv2d::declare(pb, &format!("{path}.shortcut"), 1, c_in, c_out, 1, true)?)
        } else {
            None
        };
        Ok(Shortcut { pool: stride == 2, proj })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        if self.pool {
            y = pool2(cx, y)?;
        }
        if let Some(p) = &self.proj {
            y = p.forward(cx, y)?;
        }
        Ok(y)
    }

    fn cost(&self, sink: &mut CostSink, path: &str, input: Hw, c_in: usize) -> Hw {
        let mut hw = input;
        if self.pool {
            hw = pool_cost(sink, &format!("{path}.shortcut_pool"), hw, c_in);
        }
        if let Some(p) = &self.proj {
            hw = p.cost(sink, hw);
        }
        hw
    }
}

/// The MBConv residual branch: pre-BN, 1×1 expand, depthwise, optional SE,
/// 1×1 project.
#[derive(Debug, Clone)]
pub struct MbConvBranch {
    pub path: String,
    pub pre_norm: BatchNorm,
    pub expand: Conv2d,
    pub expand_norm: BatchNorm,
    pub depthwise: DepthwiseConv2d,
    pub depthwise_norm: BatchNorm,
    pub se: Option<SqueezeExcite>,
    pub project: Conv2d,
}

impl MbConvBranch {
    fn declare(
        pb: &mut ParamBuilder,
        path: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        expansion: usize,
        se: bool,
    ) -> Result<Self> {
        let path = format!("{path}.mbconv");
        let mid = expansion * c_out;
        let p = |leaf: &str| format!("{path}.{leaf}");
        Ok(MbConvBranch {
            pre_norm: BatchNorm::declare(pb, &p("pre_norm"), c_in)?,
            expand: Conv2d::declare(pb, &p("expand"), 1, c_in, mid, 1, false)?,
            expand_norm: BatchNorm::declare(pb, &p("expand_norm"), mid)?,
            depthwise: DepthwiseConv2d::declare(pb, &p("depthwise"), 3, mid, stride)?,
            depthwise_norm: BatchNorm::declare(pb, &p("depthwise_norm"), mid)?,
            se: if se {
                Some(SqueezeExcite::declare(pb, &p("se"), mid, c_out / SE_REDUCTION)?)
            } else {
                None
            },
            project: Conv2d::declare(pb, &p("project"), 1, mid, c_out, 1, true)?,
            path,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.pre_norm.forward(cx, x)?;
        let y = self.expand.forward(cx, y)?;
        let y = self.expand_norm.forward(cx, y)?;
        let y = cx.tape.gelu(y);
        let y = self.depthwise.forward(cx, y)?;
        let shape = cx.shape(y).to_vec();
        cx.record(&self.depthwise.path, "depthwise", &shape);
        let y = self.depthwise_norm.forward(cx, y)?;
        let mut y = cx.tape.gelu(y);
        if let Some(se) = &self.se {
            y = se.forward(cx, y)?;
        }
        self.project.forward(cx, y)
    }

    fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        let mid = self.expand.cout;
        self.pre_norm.cost(sink, input);
        self.expand.cost(sink, input);
        self.expand_norm.cost(sink, input);
        gelu_cost(sink, &format!("{}.expand_act", self.path), input, mid);
        let out = self.depthwise.cost(sink, input);
        self.depthwise_norm.cost(sink, out);
        gelu_cost(sink, &format!("{}.depthwise_act", self.path), out, mid);
        if let Some(se) = &self.se {
            se.cost(sink, out);
        }
        self.project.cost(sink, out)
    }

    fn output_projection(&self) -> Vec<ParamId> {
        let mut v = vec![self.project.w];
        v.extend(self.project.b);
        v
    }
}

/// Pre-LN attention sublayer, optionally pooling between LN and attention.
#[derive(Debug, Clone)]
pub struct AttnBranch {
    pub norm: LayerNorm,
    pub pool: bool,
    pub attn: MultiHeadAttention,
}

impl AttnBranch {
    #[allow(clippy::too_many_arguments)]
    fn declare(
        pb: &mut ParamBuilder,
        path: &str,
        c_in: usize,
        c_out: usize,
        input: Hw,
        pool: bool,
        spec: &BlockSpec,
    ) -> Result<Self> {
        let grid = if pool { input.strided(2) } else { input };
        Ok(AttnBranch {
            norm: LayerNorm::declare(pb, &format!("{path}.attention_norm"), c_in)?,
            pool,
            attn: MultiHeadAttention::declare(
                pb,
                &format!("{path}.attention"),
                c_in,
                c_out,
                grid,
                spec.window.size(),
                spec.rel_bias,
            )?,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.norm.forward(cx, x)?;
        if self.pool {
            y = pool2(cx, y)?;
            let shape = cx.shape(y).to_vec();
            cx.record(&self.attn.path, "pool", &shape);
        }
        self.attn.forward(cx, y)
    }

    fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        self.norm.cost(sink, input);
        let mut hw = input;
        if self.pool {
            hw = pool_cost(sink, &format!("{}.pool", self.attn.path), hw, self.norm.c);
        }
        self.attn.cost(sink, hw);
        hw
    }
}

/// LN, 1×1 expand, optional depthwise 3×3, GeLU, 1×1 project.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub path: String,
    pub norm: LayerNorm,
    pub fc1: Conv2d,
    pub depthwise: Option<DepthwiseConv2d>,
    pub fc2: Conv2d,
}

impl Mlp {
    fn declare(pb: &mut ParamBuilder, path: &str, c: usize, expansion: usize, dw: bool) -> Result<Self> {
        let path = format!("{path}.mlp");
        let mid = expansion * c;
        Ok(Mlp {
            norm: LayerNorm::declare(pb, &format!("{path}.norm"), c)?,
            fc1: Conv2d::declare(pb, &format!("{path}.fc1"), 1, c, mid, 1, true)?,
            depthwise: if dw {
                Some(DepthwiseConv2d::declare(pb, &format!("{path}.depthwise"), 3, mid, 1)?)
            } else {
                None
            },
            fc2: Conv2d::declare(pb, &format!("{path}.fc2"), 1, mid, c, 1, true)?,
            path,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(cx, x)?;
        let mut y = self.fc1.forward(cx, y)?;
        if let Some(dw) = &self.depthwise {
            y = dw.forward(cx, y)?;
        }
        let y = cx.tape.gelu(y);
        self.fc2.forward(cx, y)
    }

    fn cost(&self, sink: &mut CostSink, input: Hw) {
        self.norm.cost(sink, input);
        self.fc1.cost(sink, input);
        if let Some(dw) = &self.depthwise {
            dw.cost(sink, input);
        }
        gelu_cost(sink, &format!("{}.act", self.path), input, self.fc1.cout);
        self.fc2.cost(sink, input);
    }
}

#[derive(Debug, Clone)]
enum Body {
    MbConv {
        shortcut: Shortcut,
        mbconv: MbConvBranch,
    },
    Moat {
        shortcut: Shortcut,
        mbconv: MbConvBranch,
        attn: AttnBranch,
    },
    /// Transformer, its depthwise-MLP variant, and the pooled CoAtNet form.
    AttnMlp {
        shortcut: Shortcut,
        attn: AttnBranch,
        mlp: Mlp,
    },
    /// Downsampling and expansion at the attention sublayer.
    AttnMbconv {
        shortcut: Shortcut,
        attn: AttnBranch,
        mbconv: MbConvBranch,
    },
    /// Attention at the input width/resolution, then a strided expanding MBConv.
    AttnMbconvDownfirst {
        attn: AttnBranch,
        shortcut: Shortcut,
        mbconv: MbConvBranch,
    },
    /// Expanding attention (with a projected residual), then a strided MBConv.
    ExpandAtAttn {
        proj: Option<Conv2d>,
        attn: AttnBranch,
        shortcut: Shortcut,
        mbconv: MbConvBranch,
    },
    PatchEmbed {
        embed: Option<(Conv2d, BatchNorm)>,
        attn: AttnBranch,
        mlp: Mlp,
    },
}

#[derive(Debug, Clone)]
pub struct Block {
    pub spec: BlockSpec,
    pub path: String,
    /// Spatial extent of the block input.
    pub input: Hw,
    body: Body,
}

impl Block {
    pub fn build(pb: &mut ParamBuilder, path: &str, spec: BlockSpec, input: Hw) -> Result<Self> {
        spec.validate()?;
        let (ci, co, s, e) = (spec.c_in, spec.c_out, spec.stride, spec.expansion);
        let body = match spec.kind {
            BlockKind::MbConv => Body::MbConv {
                shortcut: Shortcut::declare(pb, path, ci, co, s)?,
                mbconv: MbConvBranch::declare(pb, path, ci, co, s, e, spec.use_se)?,
            },
            BlockKind::Moat => Body::Moat {
                shortcut: Shortcut::declare(pb, path, ci, co, s)?,
                mbconv: MbConvBranch::declare(pb, path, ci, co, s, e, false)?,
                attn: AttnBranch::declare(pb, path, co, co, input.strided(s), false, &spec)?,
            },
            BlockKind::Transformer | BlockKind::AvgpoolAttnMlp | BlockKind::AttnMlpDwconv => Body::AttnMlp {
                shortcut: Shortcut::declare(pb, path, ci, co, s)?,
                attn: AttnBranch::declare(pb, path, ci, co, input, s == 2, &spec)?,
                mlp: Mlp::declare(pb, path, co, e, spec.kind == BlockKind::AttnMlpDwconv)?,
            },
            BlockKind::AttnMbconv => Body::AttnMbconv {
                shortcut: Shortcut::declare(pb, path, ci, co, s)?,
                attn: AttnBranch::declare(pb, path, ci, co, input, s == 2, &spec)?,
                mbconv: MbConvBranch::declare(pb, path, co, co, 1, e, false)?,
            },
            BlockKind::AttnMbconvDownfirst => Body::AttnMbconvDownfirst {
                attn: AttnBranch::declare(pb, path, ci, ci, input, false, &spec)?,
                shortcut: Shortcut::declare(pb, path, ci, co, s)?,
                mbconv: MbConvBranch::declare(pb, path, ci, co, s, e, false)?,
            },
            BlockKind::AttnMbconvExpandAtAttn => Body::ExpandAtAttn {
                proj: if ci != co {
                    Some(Conv2d::declare(pb, &format!("{path}.attention_shortcut"), 1, ci, co, 1, true)?)
                } else {
                    None
                },
                attn: AttnBranch::declare(pb, path, ci, co, input, false, &spec)?,
                shortcut: Shortcut::declare(pb, path, co, co, s)?,
                mbconv: MbConvBranch::declare(pb, path, co, co, s, e, false)?,
            },
            BlockKind::PatchembedAttnMlp => Body::PatchEmbed {
                embed: if s == 2 || ci != co {
                    Some((
                        Conv2d::declare(pb, &format!("{path}.patch_embed"), s, ci, co, s, false)?,
                        BatchNorm::declare(pb, &format!("{path}.patch_embed_norm"), co)?,
                    ))
                } else {
                    None
                },
                attn: AttnBranch::declare(pb, path, co, co, input.strided(s), false, &spec)?,
                mlp: Mlp::declare(pb, path, co, e, false)?,
            },
        };
        Ok(Block {
            spec,
            path: path.into(),
            input,
            body,
        })
    }

    pub fn output(&self) -> Hw {
        self.input.strided(self.spec.stride)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.spec.c_in {
            return Err(Error::dim("block", &s, &[self.spec.c_in]));
        }
        cx.record(&self.path, "block_in", &s);
        let mask = cx.drop_mask(s[0], self.spec.sd_survival);
        let out = match &self.body {
            Body::MbConv { shortcut, mbconv } => {
                let sc = shortcut.forward(cx, x)?;
                let b = mbconv.forward(cx, x)?;
                let b = cx.apply_mask(b, mask)?;
                cx.tape.add(sc, b)?
            }
            Body::Moat { shortcut, mbconv, attn } => {
                let sc = shortcut.forward(cx, x)?;
                let y = mbconv.forward(cx, x)?;
                let a = attn.forward(cx, y)?;
                let z = if self.spec.inner_residual { cx.tape.add(y, a)? } else { a };
                let z = cx.apply_mask(z, mask)?;
                cx.tape.add(sc, z)?
            }
            Body::AttnMlp { shortcut, attn, mlp } => {
                let sc = shortcut.forward(cx, x)?;
                let a = attn.forward(cx, x)?;
                let a = cx.apply_mask(a, mask)?;
                let h = cx.tape.add(sc, a)?;
                let m = mlp.forward(cx, h)?;
                let m = cx.apply_mask(m, mask)?;
                cx.tape.add(h, m)?
            }
            Body::AttnMbconv { shortcut, attn, mbconv } => {
                let sc = shortcut.forward(cx, x)?;
                let a = attn.forward(cx, x)?;
                let a = cx.apply_mask(a, mask)?;
                let h = cx.tape.add(sc, a)?;
                let m = mbconv.forward(cx, h)?;
                let m = cx.apply_mask(m, mask)?;
                cx.tape.add(h, m)?
            }
            Body::AttnMbconvDownfirst { attn, shortcut, mbconv } => {
                let a = attn.forward(cx, x)?;
                let a = cx.apply_mask(a, mask)?;
                let h = cx.tape.add(x, a)?;
                let sc = shortcut.forward(cx, h)?;
                let m = mbconv.forward(cx, h)?;
                let m = cx.apply_mask(m, mask)?;
                cx.tape.add(sc, m)?
            }
            Body::ExpandAtAttn {
                proj,
                attn,
                shortcut,
                mbconv,
            } => {
                let sc = match proj {
                    Some(p) => p.forward(cx, x)?,
                    None => x,
                };
                let a = attn.forward(cx, x)?;
                let a = cx.apply_mask(a, mask)?;
                let h = cx.tape.add(sc, a)?;
                let sc2 = shortcut.forward(cx, h)?;
                let m = mbconv.forward(cx, h)?;
                let m = cx.apply_mask(m, mask)?;
                cx.tape.add(sc2, m)?
            }
            Body::PatchEmbed { embed, attn, mlp } => {
                let x0 = match embed {
                    Some((conv, bn)) => {
                        let y = conv.forward(cx, x)?;
                        let shape = cx.shape(y).to_vec();
                        cx.record(&conv.path, "patch_embed", &shape);
                        bn.forward(cx, y)?
                    }
                    None => x,
                };
                let a = attn.forward(cx, x0)?;
                let a = cx.apply_mask(a, mask)?;
                let h = cx.tape.add(x0, a)?;
                let m = mlp.forward(cx, h)?;
                let m = cx.apply_mask(m, mask)?;
                cx.tape.add(h, m)?
            }
        };
        Ok(out)
    }

    /// Appends cost rows for one image and returns the output extent.
    pub fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        let (ci, co) = (self.spec.c_in, self.spec.c_out);
        let out = input.strided(self.spec.stride);
        let p = &self.path;
        let add = |sink: &mut CostSink, name: &str, hw: Hw, c: usize| {
            elementwise_cost(sink, &format!("{p}.{name}"), "elementwise", hw, c);
        };
        match &self.body {
            Body::MbConv { shortcut, mbconv } => {
                shortcut.cost(sink, p, input, ci);
                mbconv.cost(sink, input);
                add(sink, "residual", out, co);
            }
            Body::Moat { shortcut, mbconv, attn } => {
                shortcut.cost(sink, p, input, ci);
                mbconv.cost(sink, input);
                add(sink, "residual", out, co);
                attn.cost(sink, out);
                if self.spec.inner_residual {
                    add(sink, "attention_residual", out, co);
                }
            }
            Body::AttnMlp { shortcut, attn, mlp } => {
                shortcut.cost(sink, p, input, ci);
                attn.cost(sink, input);
                add(sink, "attention_residual", out, co);
                mlp.cost(sink, out);
                add(sink, "residual", out, co);
            }
            Body::AttnMbconv { shortcut, attn, mbconv } => {
                shortcut.cost(sink, p, input, ci);
                attn.cost(sink, input);
                add(sink, "attention_residual", out, co);
                mbconv.cost(sink, out);
                add(sink, "residual", out, co);
            }
            Body::AttnMbconvDownfirst { attn, shortcut, mbconv } => {
                attn.cost(sink, input);
                add(sink, "attention_residual", input, ci);
                shortcut.cost(sink, p, input, ci);
                mbconv.cost(sink, input);
                add(sink, "residual", out, co);
            }
            Body::ExpandAtAttn {
                proj,
                attn,
                shortcut,
                mbconv,
            } => {
                if let Some(c) = proj {
                    c.cost(sink, input);
                }
                attn.cost(sink, input);
                add(sink, "attention_residual", input, co);
                shortcut.cost(sink, p, input, co);
                mbconv.cost(sink, input);
                add(sink, "residual", out, co);
            }
            Body::PatchEmbed { embed, attn, mlp } => {
                if let Some((conv, bn)) = embed {
                    conv.cost(sink, input);
                    bn.cost(sink, out);
                }
                attn.cost(sink, out);
                add(sink, "attention_residual", out, co);
                mlp.cost(sink, out);
                add(sink, "residual", out, co);
            }
        }
        out
    }

    pub fn has_se(&self) -> bool {
        self.mbconv().iter().any(|m| m.se.is_some())
    }

    pub fn has_attention(&self) -> bool {
        self.attention().is_some()
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        match &self.body {
            Body::MbConv { .. } => None,
            Body::Moat { attn, .. }
            | Body::AttnMlp { attn, .. }
            | Body::AttnMbconv { attn, .. }
            | Body::AttnMbconvDownfirst { attn, .. }
            | Body::ExpandAtAttn { attn, .. }
            | Body::PatchEmbed { attn, .. } => Some(&attn.attn),
        }
    }

    fn mbconv(&self) -> Option<&MbConvBranch> {
        match &self.body {
            Body::MbConv { mbconv, .. }
            | Body::Moat { mbconv, .. }
            | Body::AttnMbconv { mbconv, .. }
            | Body::AttnMbconvDownfirst { mbconv, .. }
            | Body::ExpandAtAttn { mbconv, .. } => Some(mbconv),
            Body::AttnMlp { .. } | Body::PatchEmbed { .. } => None,
        }
    }

    /// Weights and biases of every layer that closes a residual branch:
    /// the MBConv projection, the attention output and the MLP's second layer.
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(m) = self.mbconv() {
            ids.extend(m.output_projection());
        }
        if let Some(a) = self.attention() {
            ids.push(a.wo.w);
        }
        if let Body::AttnMlp { mlp, .. } | Body::PatchEmbed { mlp, .. } = &self.body {
            ids.push(mlp.fc2.w);
            ids.extend(mlp.fc2.b);
        }
        ids
    }

    pub fn rel_bias(&self) -> Option<ParamId> {
        self.attention().and_then(|a| a.rel_bias)
    }

    pub fn heads(&self) -> Option<usize> {
        self.attention().map(|a| a.heads)
    }
}
