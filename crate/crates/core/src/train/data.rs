use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use super::{accuracy, label_smoothed_ce, AdamW};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Dense, Mode, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::rng::{normal, stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Class shifts the mean of every pixel up or down.
    TwoGaussians,
    /// Horizontal versus vertical sinusoidal gratings with random frequency,
    /// phase and contrast plus pixel noise.
    Stripes,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoGaussians => "two-gaussians-image",
            DatasetKind::Stripes => "stripe-orientation",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians-image" => Ok(DatasetKind::TwoGaussians),
            "stripe-orientation" => Ok(DatasetKind::Stripes),
            _ => Err(Error::config(format!(
                "unknown dataset {s:?} (stripe-orientation or two-gaussians-image)"
            ))),
        }
    }
}

/// Images `[n, size, size, 3]` with balanced binary labels (`i % 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub kind: DatasetKind,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

pub const NOISE_STD: f64 = 0.3;
pub const GAUSSIAN_OFFSET: f64 = 0.25;

pub fn synth_dataset<T: Real>(kind: DatasetKind, n: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    if size < 16 {
        return Err(Error::config(format!("dataset image size {size} below 16")));
    }
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    let mut rng = stream(seed, Stream::Data);
    let per = size * size * 3;
    let mut data = Vec::with_capacity(n * per);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let tau = core::f64::consts::TAU;
    for &label in &labels {
        match kind {
            DatasetKind::Stripes => {
                let freq = rng.random_range(1.5..4.0);
                let phase = rng.random_range(0.0..tau);
                let gain: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.5..1.0));
                for r in 0..size {
                    for c in 0..size {
                        let t = if label == 0 { r } else { c } as f64 / size as f64;
                        let s = libm::sin(tau * freq * t + phase);
                        for g in gain {
                            data.push(T::of(g * s + NOISE_STD * normal(&mut rng)));
                        }
                    }
                }
            }
            DatasetKind::TwoGaussians => {
                let mu = if label == 0 { -GAUSSIAN_OFFSET } else { GAUSSIAN_OFFSET };
                for _ in 0..per {
                    data.push(T::of(mu + normal(&mut rng)));
                }
            }
        }
    }
    Ok(Dataset {
        kind,
        images: Tensor::new(&[n, size, size, 3], data)?,
        labels,
    })
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let t = Tensor::new(&[idx.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Multinomial logistic regression on raw pixels, trained full-batch on
/// `train` and scored on `test`. Returns `(train accuracy, test accuracy)`.
pub fn linear_probe(train: &Dataset<f32>, test: &Dataset<f32>, steps: usize, lr: f64) -> Result<(f64, f64)> {
    let s = train.images.shape();
    let d = s[1] * s[2] * s[3];
    let k = 2;
    let mut pb = ParamBuilder::new();
    let layer = Dense::declare(&mut pb, "probe", d, k, true)?;
    let mut rng = stream(0, Stream::Probe);
    let mut store = ParamStore::<f32>::materialize(pb.specs(), &mut rng);
    let mut opt = AdamW::new(0.0);
    let flat = |ds: &Dataset<f32>| ds.images.clone().reshape(&[ds.len(), d]);
    let (xtr, xte) = (flat(train)?, flat(test)?);
    for _ in 0..steps {
        let mut cx = Ctx::new(&store, Mode::Train, 0);
        let x = cx.input(xtr.clone());
        let logits = layer.forward(&mut cx, x)?;
        let loss = label_smoothed_ce(&mut cx.tape, logits, &train.labels, 0.0)?;
        cx.backward(loss)?;
        let grads = cx.param_grads();
        store.zero_grad();
        store.accumulate_grads(grads);
        opt.step(&mut store, lr)?;
    }
    let score = |x: &Tensor<f32>, labels: &[usize]| -> Result<f64> {
        let mut cx = Ctx::new(&store, Mode::Eval, 0);
        let xv = cx.input(x.clone());
        let logits = layer.forward(&mut cx, xv)?;
        Ok(accuracy(cx.value(logits), labels))
    };
    Ok((score(&xtr, &train.labels)?, score(&xte, &test.labels)?))
}
