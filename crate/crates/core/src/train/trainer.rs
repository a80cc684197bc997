use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{accuracy, clip_global_norm, cosine_lr, label_smoothed_ce, AdamW, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamId};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::zoo::Model;

/// One progress record. Step 0 is the untrained model on the first batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<Metrics>,
    /// Eval-mode accuracy over the whole training set after the last step.
    pub final_train_acc: f64,
}

/// Seeded per-epoch shuffles of `0..n`, cut into batches of `size` (the last
/// partial batch of an epoch is dropped when `n >= size`).
struct Batches {
    rng: crate::rng::StreamRng,
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Batches {
            rng: stream(seed, Stream::Batches),
            n,
            size: size.min(n),
            order: Vec::new(),
            pos: usize::MAX,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos.saturating_add(self.size) > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        b
    }
}

/// Mean smoothed loss and accuracy in eval mode, over batches of `batch`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>, batch: usize, alpha: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut cx = Ctx::new(&model.store, Mode::Eval, 0);
        let xv = cx.input(x);
        let logits = model.forward(&mut cx, xv)?;
        let l = label_smoothed_ce(&mut cx.tape, logits, &y, alpha)?;
        loss += cx.value(l).data()[0].f64() * chunk.len() as f64;
        hits += accuracy(cx.value(logits), &y) * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits / n))
}

/// Replaces every batch-norm running statistic with the plain average of its
/// train-mode batch statistics over full batches of `data`, weights frozen
/// and drop path off. The EMA lags when weights are still moving late in a
/// short run; eval-mode accuracy can then collapse.
pub fn recalibrate_bn<T: Real>(model: &mut Model<T>, data: &Dataset<T>, batch: usize) -> Result<()> {
    if data.is_empty() {
        return Ok(());
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let size = batch.clamp(1, data.len());
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    let mut count = 0.0;
    for chunk in idx.chunks_exact(size) {
        let (x, _) = data.batch(chunk);
        let mut cx = Ctx::new(&model.store, Mode::Train, 0);
        cx.disable_drop_path();
        let xv = cx.input(x);
        model.forward(&mut cx, xv)?;
        for (id, t) in cx.take_batch_stats() {
            let acc = sums[id.0].get_or_insert_with(|| vec![0.0; t.len()]);
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v.f64();
            }
        }
        count += 1.0;
    }
    let updates = sums
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .map(|(i, s)| (ParamId(i), Tensor::from_fn(&[s.len()], |j| T::of(s[j] / count))))
        .collect();
    model.store.apply_stat_updates(updates);
    Ok(())
}

fn scalar<T: Real>(t: &Tensor<T>) -> f64 {
    t.data()[0].f64()
}

/// Runs `cfg.total_steps` AdamW steps. `on_metrics` sees every record as it
/// is produced. A non-finite loss stops training with [`Error::Diverged`].
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&Metrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.total_steps + 1);

    let first: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
    let (x, y) = data.batch(&first);
    let mut cx = Ctx::new(&model.store, Mode::Eval, cfg.seed);
    let xv = cx.input(x);
    let logits = model.forward(&mut cx, xv)?;
    let l = label_smoothed_ce(&mut cx.tape, logits, &y, cfg.label_smoothing)?;
    let m0 = Metrics {
        step: 0,
        lr: cosine_lr(0, cfg),
        loss: scalar(cx.value(l)),
        acc: accuracy(cx.value(logits), &y),
    };
    drop(cx);
    on_metrics(&m0);
    history.push(m0);

    for step in 1..=cfg.total_steps {
        let lr = cosine_lr(step, cfg);
        let idx = batches.next().to_vec();
        let (x, y) = data.batch(&idx);
        let drop_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let mut cx = Ctx::new(&model.store, Mode::Train, drop_seed);
        let xv = cx.input(x);
        let logits = model.forward(&mut cx, xv)?;
        let l = label_smoothed_ce(&mut cx.tape, logits, &y, cfg.label_smoothing)?;
        let loss = scalar(cx.value(l));
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let acc = accuracy(cx.value(logits), &y);
        cx.backward(l)?;
        let grads = cx.param_grads();
        let stats = cx.take_stat_updates();
        drop(cx);
        let (ids, mut tensors): (Vec<_>, Vec<_>) = grads.into_iter().unzip();
        clip_global_norm(&mut tensors, cfg.grad_clip_norm);
        model.store.zero_grad();
        model.store.accumulate_grads(ids.into_iter().zip(tensors).collect());
        opt.step(&mut model.store, lr).map_err(|_| Error::Diverged { step, loss })?;
        model.store.apply_stat_updates(stats);
        let m = Metrics { step, lr, loss, acc };
        on_metrics(&m);
        history.push(m);
    }
    if cfg.total_steps > 0 {
        recalibrate_bn(model, data, cfg.batch_size)?;
    }
    let (_, final_train_acc) = evaluate(model, data, cfg.batch_size, cfg.label_smoothing)?;
    Ok(TrainOutcome {
        history,
        final_train_acc,
    })
}
