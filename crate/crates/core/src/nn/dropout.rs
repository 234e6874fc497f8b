use rand::Rng;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

struct Dropout<T> {
    mask: Vec<T>,
}

impl<T: Element> Backward<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_out.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

impl<T: Element> Tape<T> {
    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`. Eval mode
    /// and `rate == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate must lie in [0, 1), got {}", rate);
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = t.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        self.record(value, &[x], Dropout { mask })
    }
}
