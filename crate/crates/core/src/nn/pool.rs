use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

struct AvgPool {
    window: usize,
}

impl<T: Element> Backward<T> for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let s = ctx.inputs[0].shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let k = self.window;
        let (oh, ow) = (h / k, w / k);
        let scale = T::from_f64(1.0 / (k * k) as f64);
        let mut g = vec![T::zero(); nc * h * w];
        for p in 0..nc {
            for y in 0..h {
                for x in 0..w {
                    g[(p * h + y) * w + x] = ctx.grad_out[(p * oh + y / k) * ow + x / k] * scale;
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Element> Tape<T> {
    /// Non-overlapping `window×window` mean pooling. `window == D` pools globally.
    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 {
            bail!(Shape, "avg_pool expects [N,C,H,W], got {:?}", t.shape());
        }
        let s = t.shape().to_vec();
        if window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
            bail!(Shape, "window {} does not tile {}×{}", window, s[2], s[3]);
        }
        if window == 1 {
            return Ok(x);
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let v = t.values();
        let scale = T::from_f64(1.0 / (window * window) as f64);
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            for y in 0..h {
                let row = &v[(p * h + y) * w..(p * h + y + 1) * w];
                let orow = &mut out[(p * oh + y / window) * ow..(p * oh + y / window + 1) * ow];
                for (x, &val) in row.iter().enumerate() {
                    orow[x / window] += val;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= scale);
        let value = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        self.record(value, &[x], AvgPool { window })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    #[test]
    fn tile_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(y).to_vec(), vec![2.5]);
        let same = tape.avg_pool(x, 1).unwrap();
        assert!(tape.value(same).bit_eq(tape.value(x)));
        assert!(tape.avg_pool(x, 3).is_err());
    }

    #[test]
    fn constant_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.75).unwrap());
        let y = tape.avg_pool(x, 2).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn gradient() {
        let x0 = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.avg_pool(x, 2)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
