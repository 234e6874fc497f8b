//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and variance, updated in train mode.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]).expect("channels > 0"), var: Tensor::ones(&[channels]).expect("channels > 0") }
    }
}

struct BatchNormTrain<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

struct BatchNormEval<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2] * shape[3])
}

impl<T: Element> Backward<T> for BatchNormTrain<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (n, c, plane) = dims(ctx.inputs[0].shape());
        let gamma = ctx.inputs[1].values();
        let go = ctx.grad_out;
        let m = T::from_f64((n * plane) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for k in off..off + plane {
                    dgamma[ch] += go[k] * self.xhat[k];
                    dbeta[ch] += go[k];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); go.len()];
            for b in 0..n {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch] / m;
                    let off = (b * c + ch) * plane;
                    for k in off..off + plane {
                        dx[k] = scale * (m * go[k] - dbeta[ch] - self.xhat[k] * dgamma[ch]);
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    }
}

impl<T: Element> Backward<T> for BatchNormEval<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (n, c, plane) = dims(ctx.inputs[0].shape());
        let gamma = ctx.inputs[1].values();
        let go = ctx.grad_out;
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); go.len()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for k in off..off + plane {
                    dgamma[ch] += go[k] * self.xhat[k];
                    dbeta[ch] += go[k];
                }
                if let Some(dx) = dx.as_mut() {
                    let s = gamma[ch] * self.inv_std[ch];
                    for k in off..off + plane {
                        dx[k] = go[k] * s;
                    }
                }
            }
        }
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    }
}

impl<T: Element> Tape<T> {
    /// Normalizes each channel and applies `γ·x̂ + β`. Train mode uses batch
    /// statistics (biased variance) and folds them into `running` with
    /// `momentum` (unbiased variance); eval mode uses `running` as is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            bail!(Shape, "batch_norm expects [N,C,H,W], got {:?}", shape);
        }
        let (n, c, plane) = dims(&shape);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                bail!(Shape, "{} must have shape [{}], got {:?}", what, c, self.value(v).shape());
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            bail!(Shape, "running statistics do not match {} channels", c);
        }
        let xs = self.value(x).values();
        let g = self.value(gamma).values();
        let bt = self.value(beta).values();
        let eps = T::from_f64(epsilon);
        let count = n * plane;

        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    bail!(Numerics, "batch statistics need at least 2 values per channel, got {}", count);
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::from_f64(1.0 / count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        mean[ch] += xs[off..off + plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let mu = mean[ch];
                        var[ch] += xs[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv);
                (mean, var)
            }
            Mode::Eval => (running.mean.to_vec(), running.var.to_vec()),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, is, gm, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for k in off..off + plane {
                    let h = (xs[k] - mu) * is;
                    xhat[k] = h;
                    out[k] = gm * h + be;
                }
            }
        }
        drop((xs, g, bt));

        let value = Tensor::from_vec(&shape, out)?;
        match mode {
            Mode::Train => {
                let mom = T::from_f64(momentum);
                let keep = T::one() - mom;
                let unbias = T::from_f64(count as f64 / (count - 1) as f64);
                let rm: Vec<T> = running.mean.values().iter().zip(&mean).map(|(&r, &m)| keep * r + mom * m).collect();
                let rv: Vec<T> = running.var.values().iter().zip(&var).map(|(&r, &v)| keep * r + mom * v * unbias).collect();
                running.mean = Tensor::from_vec(&[c], rm)?;
                running.var = Tensor::from_vec(&[c], rv)?;
                self.record(value, &[x, gamma, beta], BatchNormTrain { xhat, inv_std })
            }
            Mode::Eval => self.record(value, &[x, gamma, beta], BatchNormEval { xhat, inv_std }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64, shift: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale + shift).collect()).unwrap()
    }

    fn bn(x: &Tensor<f64>, running: &mut RunningStats<f64>, mode: Mode) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[c]).unwrap());
        let b = tape.constant(Tensor::zeros(&[c]).unwrap());
        let y = tape.batch_norm(xv, g, b, running, mode, BN_MOMENTUM, BN_EPSILON).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn train_output_is_standardized() {
        let x = random(&[4, 3, 5, 5], 1, 3.0, 2.0);
        let y = bn(&x, &mut RunningStats::new(3), Mode::Train);
        let v = y.to_vec();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| v[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.25).unwrap();
        let y = bn(&x, &mut RunningStats::new(1), Mode::Train);
        assert!(y.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn eval_with_batch_stats_matches_train() {
        let x = random(&[3, 2, 4, 4], 2, 1.5, -0.5);
        let train = bn(&x, &mut RunningStats::new(2), Mode::Train);
        // oracle: biased per-channel statistics computed directly
        let v = x.to_vec();
        let mut mean = vec![0.0; 2];
        let mut var = vec![0.0; 2];
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| v[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec()).collect();
            mean[ch] = vals.iter().sum::<f64>() / 48.0;
            var[ch] = vals.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>() / 48.0;
        }
        let mut running = RunningStats { mean: Tensor::from_vec(&[2], mean).unwrap(), var: Tensor::from_vec(&[2], var).unwrap() };
        let eval = bn(&x, &mut running, Mode::Eval);
        assert!(train.max_abs_diff(&eval).unwrap() < 1e-4);
    }

    #[test]
    fn running_stats_update() {
        let x = random(&[2, 1, 2, 2], 3, 1.0, 5.0);
        let mut running = RunningStats::new(1);
        bn(&x, &mut running, Mode::Train);
        let v = x.to_vec();
        let mean = v.iter().sum::<f64>() / 8.0;
        let unbiased = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((running.mean.to_vec()[0] - 0.1 * mean).abs() < 1e-12);
        assert!((running.var.to_vec()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_rejected() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 1]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let r = tape.batch_norm(xv, g, b, &mut RunningStats::new(2), Mode::Train, BN_MOMENTUM, BN_EPSILON);
        assert!(matches!(r, Err(crate::Error::Numerics(_))));
    }

    #[test]
    fn gradients() {
        let x0 = random(&[2, 3, 3, 3], 4, 1.0, 0.3);
        let probe = random(&[2, 3, 3, 3], 5, 1.0, 0.0);
        let gamma0 = random(&[3], 6, 0.5, 1.0);
        let beta0 = random(&[3], 7, 0.5, 0.0);
        for mode in [Mode::Train, Mode::Eval] {
            let f = |tape: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
                let mut running = RunningStats { mean: Tensor::full(&[3], 0.1)?, var: Tensor::full(&[3], 0.8)? };
                let y = tape.batch_norm(x, g, b, &mut running, mode, BN_MOMENTUM, BN_EPSILON)?;
                let p = tape.constant(probe.clone());
                let yp = tape.mul(y, p)?;
                tape.sum(yp)
            };
            let ex = grad_check(
                |t, x| {
                    let g = t.constant(gamma0.clone());
                    let b = t.constant(beta0.clone());
                    f(t, x, g, b)
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let eg = grad_check(
                |t, g| {
                    let x = t.constant(x0.clone());
                    let b = t.constant(beta0.clone());
                    f(t, x, g, b)
                },
                &gamma0,
                1e-5,
            )
            .unwrap();
            let eb = grad_check(
                |t, b| {
                    let x = t.constant(x0.clone());
                    let g = t.constant(gamma0.clone());
                    f(t, x, g, b)
                },
                &beta0,
                1e-5,
            )
            .unwrap();
            assert!(ex < 1e-5 && eg < 1e-6 && eb < 1e-6, "{mode:?}: {ex} {eg} {eb}");
        }
    }
}
