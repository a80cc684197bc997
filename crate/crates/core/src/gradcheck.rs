//! Central finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamId, ParamStore};
use crate::rng::{stream, uniform_tensor, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates checked when the model has more than this many.
    pub samples: usize,
    pub seed: u64,
    /// Eval by default: with batch statistics, a norm shift feeding another
    /// batch norm has an exactly zero gradient that the relative error
    /// cannot resolve.
    pub mode: Mode,
    /// Corrupt one op's backward rule (verification of the checker itself).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tol: 1e-4,
            samples: 200,
            seed: 0,
            mode: Mode::Eval,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `name[flat index]` of the worst coordinate.
    pub worst_param: String,
    pub checked: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    if shape.iter().product::<usize>() == 1 {
        return Tensor::ones(shape);
    }
    let mut rng = stream(seed ^ 0x9e37_79b9, Stream::Gradcheck);
    uniform_tensor(&mut rng, shape, -1.0, 1.0)
}

/// Loss `Σ out ⊙ r`, plus the analytic gradient at each of `want` when given.
fn eval<F>(
    store: &ParamStore<f64>,
    opts: &GradcheckOptions,
    build: &mut F,
    want: Option<&[(usize, usize)]>,
) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut cx = Ctx::new(store, opts.mode, opts.seed).with_fault(opts.fault);
    if let Some(w) = want {
        let ids: Vec<ParamId> = w.iter().map(|&(p, _)| ParamId(p)).collect();
        cx = cx.with_grads_only(&ids);
    }
    cx.disable_drop_path();
    let out = build(&mut cx)?;
    let r = projection(cx.shape(out), opts.seed);
    let y = cx.value(out);
    if !y.all_finite() {
        return Err(Error::NonFinite(String::from("forward output")));
    }
    let l: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    let Some(want) = want else {
        return Ok((l, Vec::new()));
    };
    cx.tape.backward_seeded(out, r)?;
    let grads = want
        .iter()
        .map(|&(p, j)| cx.param_grad(ParamId(p)).map_or(0.0, |g| g.data()[j]))
        .collect();
    Ok((l, grads))
}

/// Compares analytic parameter gradients of `Σ out ⊙ r`, where `out` is built
/// by `build` and `r` is a fixed random tensor (1 for scalar outputs), against
/// central differences. Every trainable coordinate is checked when
/// there are at most `opts.samples`; otherwise a seeded sample of that size.
/// Only the sampled tensors carry gradients, which keeps the largest family
/// members within memory.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, opts: &GradcheckOptions, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    let mut total = 0usize;
    for (i, e) in store.entries().iter().enumerate() {
        if e.trainable() {
            sizes.push((i, e.spec.numel()));
            total += e.spec.numel();
        }
    }
    let coord = |mut k: usize| -> (usize, usize) {
        for &(i, n) in &sizes {
            if k < n {
                return (i, k);
            }
            k -= n;
        }
        unreachable!("coordinate index below the total")
    };
    let chosen: Vec<(usize, usize)> = if total <= opts.samples {
        (0..total).map(coord).collect()
    } else {
        let mut rng = stream(opts.seed, Stream::Gradcheck);
        let mut idx = sample(&mut rng, total, opts.samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(coord).collect()
    };
    let (l0, analytic) = eval(store, opts, &mut build, Some(&chosen))?;
    let (l1, _) = eval(store, opts, &mut build, None)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { first: l0, second: l1 });
    }
    let mut worst = (0.0f64, String::new());
    for (&(p, j), &a) in chosen.iter().zip(&analytic) {
        let id = ParamId(p);
        let orig = store.entry(id).value.data()[j];
        store.entry_mut(id).value_mut().data_mut()[j] = orig + opts.h;
        let plus = eval(store, opts, &mut build, None).map(|r| r.0);
        store.entry_mut(id).value_mut().data_mut()[j] = orig - opts.h;
        let minus = eval(store, opts, &mut build, None).map(|r| r.0);
        store.entry_mut(id).value_mut().data_mut()[j] = orig;
        let fd = (plus? - minus?) / (2.0 * opts.h);
        let e = rel_err(a, fd);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, format!("{}[{j}]", store.entry(id).spec.name));
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst.0,
        worst_param: worst.1,
        checked: chosen.len(),
        tol: opts.tol,
    })
}

/// Checks one primitive with the given named inputs treated as parameters.
pub fn check_primitive<F>(inputs: Vec<(&str, Tensor<f64>)>, opts: &GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let named = inputs.into_iter().map(|(n, t)| (String::from(n), t)).collect();
    let mut store = ParamStore::from_tensors(named)?;
    let n = store.len();
    gradcheck(&mut store, opts, |cx| {
        let vars: Vec<Var> = (0..n).map(|i| cx.param(ParamId(i))).collect();
        f(&mut cx.tape, &vars)
    })
}

fn rand_t(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    uniform_tensor(rng, shape, lo, hi)
}

/// Gradient check of every primitive op on small random inputs.
pub fn primitive_suite(opts: &GradcheckOptions) -> Result<Vec<(OpKind, GradcheckReport)>> {
    let mut rng = stream(opts.seed, Stream::Gradcheck);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let r = |rng: &mut _, s: &[usize]| rand_t(rng, s, -1.0, 1.0);
        let report = match kind {
            OpKind::Add => check_primitive(vec![("a", r(&mut rng, &[2, 3, 4])), ("b", r(&mut rng, &[4]))], opts, |t, v| t.add(v[0], v[1]))?,
            OpKind::Sub => check_primitive(vec![("a", r(&mut rng, &[2, 3])), ("b", r(&mut rng, &[2, 3]))], opts, |t, v| t.sub(v[0], v[1]))?,
            OpKind::Mul => check_primitive(
                vec![("a", r(&mut rng, &[2, 2, 3, 4])), ("b", r(&mut rng, &[2, 1, 1, 4]))],
                opts,
                |t, v| t.mul(v[0], v[1]),
            )?,
            OpKind::Scale => check_primitive(vec![("a", r(&mut rng, &[3, 4]))], opts, |t, v| Ok(t.scale(v[0], -1.7)))?,
            OpKind::AddScalar => check_primitive(vec![("a", r(&mut rng, &[3, 4]))], opts, |t, v| Ok(t.add_scalar(v[0], 0.3)))?,
            OpKind::MatMul => check_primitive(vec![("a", r(&mut rng, &[2, 3, 4])), ("b", r(&mut rng, &[2, 4, 5]))], opts, |t, v| t.matmul(v[0], v[1]))?,
            OpKind::Reshape => check_primitive(vec![("a", r(&mut rng, &[2, 6]))], opts, |t, v| t.reshape(v[0], &[3, 4]))?,
            OpKind::Permute => check_primitive(vec![("a", r(&mut rng, &[2, 3, 4]))], opts, |t, v| t.permute(v[0], &[2, 0, 1]))?,
            OpKind::Conv2d => check_primitive(
                vec![("x", r(&mut rng, &[2, 5, 5, 2])), ("w", r(&mut rng, &[3, 3, 2, 3]))],
                opts,
                |t, v| t.conv2d(v[0], v[1], 2),
            )?,
            OpKind::DepthwiseConv2d => check_primitive(
                vec![("x", r(&mut rng, &[2, 5, 4, 3])), ("w", r(&mut rng, &[3, 3, 3]))],
                opts,
                |t, v| t.depthwise_conv2d(v[0], v[1], 2),
            )?,
            OpKind::AvgPool => check_primitive(vec![("x", r(&mut rng, &[1, 5, 4, 2]))], opts, |t, v| t.avg_pool(v[0], 2, 2))?,
            OpKind::Sum => check_primitive(vec![("x", r(&mut rng, &[2, 3, 4]))], opts, |t, v| t.sum(v[0], &[1]))?,
            OpKind::Mean => check_primitive(vec![("x", r(&mut rng, &[2, 3, 4]))], opts, |t, v| t.mean(v[0], &[0, 2]))?,
            OpKind::Max => check_primitive(vec![("x", r(&mut rng, &[2, 3, 4]))], opts, |t, v| t.max(v[0], &[1]))?,
            OpKind::Softmax => check_primitive(vec![("x", r(&mut rng, &[3, 5]))], opts, |t, v| t.softmax(v[0], 1))?,
            OpKind::LogSoftmax => check_primitive(vec![("x", r(&mut rng, &[4, 3]))], opts, |t, v| t.log_softmax(v[0], 0))?,
            OpKind::Gelu => check_primitive(vec![("x", rand_t(&mut rng, &[3, 4], -3.0, 3.0))], opts, |t, v| Ok(t.gelu(v[0])))?,
            OpKind::Sigmoid => check_primitive(vec![("x", rand_t(&mut rng, &[3, 4], -4.0, 4.0))], opts, |t, v| Ok(t.sigmoid(v[0])))?,
            OpKind::HardSwish => check_primitive(vec![("x", rand_t(&mut rng, &[3, 4], -2.9, 2.9))], opts, |t, v| Ok(t.hard_swish(v[0])))?,
            OpKind::Rsqrt => check_primitive(vec![("x", rand_t(&mut rng, &[3, 4], 0.5, 2.0))], opts, |t, v| Ok(t.rsqrt(v[0])))?,
            OpKind::Gather => {
                let idx: Arc<[usize]> = Arc::from(vec![0usize, 3, 3, 5, 1, 0, 7, 2]);
                check_primitive(vec![("x", r(&mut rng, &[8]))], opts, move |t, v| t.gather(v[0], idx.clone(), &[2, 4]))?
            }
        };
        out.push((kind, report));
    }
    Ok(out)
}
