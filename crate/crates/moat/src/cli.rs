//! Command-line driver. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | a check failed (gradcheck)                |
//! | 2    | usage or configuration error              |
//! | 3    | numeric fault during verification         |
//! | 4    | training diverged                         |

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use moat_core::analysis::{ablation_cost_table, cost_report, AblationSuite};
use moat_core::gradcheck::{gradcheck, primitive_suite, GradcheckOptions};
use moat_core::nn::Mode;
use moat_core::rng::{stream, uniform_tensor, Stream};
use moat_core::train::{accuracy, synth_dataset, train, DatasetKind, Metrics};
use moat_core::zoo::{adapt_downstream, downstream_plan, family_config, Architecture, Model, ModelConfig};
use moat_core::{Error as CoreError, OpKind};

use crate::checkpoint;
use crate::config::{load_config, save_config};
use crate::error::Error;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "moat", version, about = "MOAT conv-attention models: cost model, gradient checks, desk-scale training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and FLOP report.
    Describe(DescribeArgs),
    /// Finite-difference check of the model's gradients in double precision.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic dataset and write a checkpoint.
    Train(TrainArgs),
    /// Eval-mode predictions on synthetic samples.
    Infer(InferArgs),
    /// Reproduce the cost columns of an ablation table.
    Ablate(AblateArgs),
    /// Convert a classification checkpoint for window attention at a new size.
    Adapt(AdaptArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelRef {
    /// Family member, e.g. moat-0 or tiny-moat-2.
    #[arg(long)]
    pub model: Option<String>,
    /// Model configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelRef {
    fn resolve(&self) -> Result<ModelConfig, Error> {
        match (&self.model, &self.config) {
            (Some(name), _) => Ok(family_config(name)?),
            (None, Some(path)) => load_config(path),
            (None, None) => unreachable!("clap requires one of --model/--config"),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Eval,
    Train,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetArg {
    StripeOrientation,
    TwoGaussiansImage,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::StripeOrientation => DatasetKind::Stripes,
            DatasetArg::TwoGaussiansImage => DatasetKind::TwoGaussians,
        }
    }
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelRef,
    /// Input side; defaults to the config's input_size.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelRef,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter coordinates to check (all of them if the model has fewer).
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, value_enum, default_value = "eval")]
    pub mode: ModeArg,
    /// Corrupt the backward rule of one op (checks the checker).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelRef,
    #[arg(long, value_enum, default_value = "stripe-orientation")]
    pub dataset: DatasetArg,
    /// Number of optimizer steps; defaults to the config's total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training-set size.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint written after the last step.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the metric lines to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelRef,
    /// Weights to load; without it the model is freshly initialized from --seed.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stripe-orientation")]
    pub dataset: DatasetArg,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = parse_suite)]
    pub suite: AblationSuite,
    /// Base layout; defaults to the layout of the published table.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

fn parse_suite(s: &str) -> Result<AblationSuite, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub model: ModelRef,
    /// Attention window for stage 4.
    #[arg(long)]
    pub window: usize,
    #[arg(long)]
    pub input_size: usize,
    /// Classification checkpoint.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Downstream checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the adapted config here.
    #[arg(long)]
    pub out_config: Option<PathBuf>,
}

/// Exit status plus message for a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Core(CoreError::NonFinite(_) | CoreError::NonDeterministic { .. }) => 3,
            Error::Core(CoreError::Diverged { .. }) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Error::Core(e).into()
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return e.exit_code();
        }
    };
    let res = match &cli.command {
        Command::Describe(a) => describe(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::Adapt(a) => adapt(a, out),
    };
    let _ = out.flush();
    match res {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn with_input_size(mut cfg: ModelConfig, size: Option<usize>) -> Result<ModelConfig, Failure> {
    if let Some(s) = size {
        cfg.input_size = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn describe(a: &DescribeArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = with_input_size(a.model.resolve()?, a.input_size)?;
    let arch = Architecture::build(&cfg)?;
    let r = cost_report(&arch, cfg.input_size)?;
    let text = match a.format {
        Format::Table => report::cost_table(&r),
        Format::Csv => report::cost_csv(&r),
    };
    out.write_all(text.as_bytes())?;
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let fault = match &a.fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure {
            code: 2,
            message: format!("unknown op {name:?} for --fault"),
        })?),
        None => None,
    };
    let cfg = with_input_size(a.model.resolve()?, a.input_size)?;
    let opts = GradcheckOptions {
        h: a.step,
        tol: a.tol,
        samples: a.samples as usize,
        seed: a.seed,
        mode: match a.mode {
            ModeArg::Eval => Mode::Eval,
            ModeArg::Train => Mode::Train,
        },
        fault,
    };
    let mut model = Model::<f64>::new(&cfg, a.seed)?;
    let s = cfg.input_size;
    let x = uniform_tensor::<f64, _>(&mut stream(a.seed, Stream::Data), &[a.batch, s, s, 3], -1.0, 1.0);
    let arch = model.arch.clone();
    let params = model.store.trainable_count();
    let r = gradcheck(&mut model.store, &opts, |cx| {
        let xv = cx.input(x.clone());
        arch.forward(cx, xv)
    })?;
    writeln!(
        out,
        "gradcheck model={} params={params} checked={} max_rel_err={:.3e} worst={} tol={:e}",
        cfg.name, r.checked, r.max_rel_err, r.worst_param, r.tol
    )?;
    if r.passed() {
        writeln!(out, "PASS")?;
        return Ok(0);
    }
    writeln!(out, "FAIL")?;
    // Localize the failure to primitive ops.
    let prim = GradcheckOptions {
        samples: 100,
        mode: Mode::Eval,
        ..opts
    };
    for (op, pr) in primitive_suite(&prim)? {
        if pr.max_rel_err >= 1e-6 {
            writeln!(out, "faulty op: {} max_rel_err={:.3e}", op.name(), pr.max_rel_err)?;
        }
    }
    Ok(1)
}

fn metric_line(m: &Metrics) -> String {
    format!("step={} lr={:.6e} loss={:.6} acc={:.4}", m.step, m.lr, m.loss, m.acc)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.model.resolve()?;
    let mut tc = cfg.train.clone().unwrap_or_default();
    if let Some(steps) = a.steps {
        tc.total_steps = steps;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    tc.warmup_steps = tc.warmup_steps.min(tc.total_steps);
    tc.seed = a.seed;
    let data = synth_dataset::<f32>(a.dataset.into(), a.n, cfg.input_size, a.seed)?;
    let mut model = Model::<f32>::new(&cfg, a.seed)?;
    let mut metrics_file = match &a.metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut io_err: Option<io::Error> = None;
    let outcome = train(&mut model, &data, &tc, |m| {
        let line = metric_line(m);
        let mut res = writeln!(out, "{line}");
        if let Some(f) = metrics_file.as_mut() {
            res = res.and_then(|_| writeln!(f, "{line}"));
        }
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }
    checkpoint::save(&model.store, &a.out)?;
    writeln!(out, "final_train_acc={:.4}", outcome.final_train_acc)?;
    writeln!(out, "checkpoint={}", a.out.display())?;
    Ok(0)
}

fn load_model(cfg: &ModelConfig, ckpt: Option<&Path>, seed: u64) -> Result<Model<f32>, Failure> {
    let mut model = Model::<f32>::new(cfg, seed)?;
    if let Some(p) = ckpt {
        checkpoint::load(&mut model.store, p)?;
    }
    Ok(model)
}

fn infer(a: &InferArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.model.resolve()?;
    let model = load_model(&cfg, a.ckpt.as_deref(), a.seed)?;
    let data = synth_dataset::<f32>(a.dataset.into(), a.n, cfg.input_size, a.seed)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx);
    let mut cx = moat_core::nn::Ctx::new(&model.store, Mode::Eval, a.seed);
    let xv = cx.input(x);
    let logits = model.forward(&mut cx, xv)?;
    let lv = cx.value(logits);
    let k = lv.shape()[1];
    for (i, row) in lv.data().chunks(k).enumerate() {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0;
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "sample={i} label={} pred={pred} logits={}", y[i], vals.join(","))?;
    }
    writeln!(out, "accuracy={:.4}", accuracy(lv, &y))?;
    Ok(0)
}

fn ablate(a: &AblateArgs, out: &mut dyn Write) -> CmdResult {
    let layout = a.layout.clone().unwrap_or_else(|| a.suite.default_layout().to_string());
    let t = ablation_cost_table(a.suite, &layout)?;
    let text = match a.format {
        Format::Table => report::ablation_table(&t),
        Format::Csv => report::ablation_csv(&t),
    };
    out.write_all(text.as_bytes())?;
    Ok(0)
}

fn adapt(a: &AdaptArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.model.resolve()?;
    let model = load_model(&cfg, Some(&a.input), 0)?;
    let adapted = adapt_downstream(&model, downstream_plan(a.window), a.input_size)?;
    checkpoint::save(&adapted.model.store, &a.out)?;
    if let Some(p) = &a.out_config {
        save_config(adapted.model.config(), p)?;
    }
    for name in &adapted.dropped {
        writeln!(out, "dropped {name}")?;
    }
    writeln!(
        out,
        "adapted model={} input_size={} window={} tensors={} dropped={}",
        cfg.name,
        a.input_size,
        a.window,
        adapted.model.store.len(),
        adapted.dropped.len()
    )?;
    Ok(0)
}

