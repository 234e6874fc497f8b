use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

/// Negative-side slope of the network's activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// `x` for `x ≥ 0`, `slope·x` otherwise.
#[inline]
pub fn leaky_relu_scalar<T: Element>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu_scalar`]; the kink at 0 takes the positive branch.
#[inline]
pub fn leaky_relu_derivative<T: Element>(x: T, slope: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        slope
    }
}

struct LeakyRelu<T> {
    slope: T,
}

impl<T: Element> Backward<T> for LeakyRelu<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].values();
        let g = x.iter().zip(ctx.grad_out).map(|(&x, &g)| g * leaky_relu_derivative(x, self.slope)).collect();
        vec![Some(g)]
    }
}

impl<T: Element> Tape<T> {
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            bail!(Config, "leaky slope must lie in (0, 1), got {}", slope);
        }
        let slope = T::from_f64(slope);
        let t = self.value(x);
        let data = t.values().iter().map(|&v| leaky_relu_scalar(v, slope)).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        self.record(value, &[x], LeakyRelu { slope })
    }
}
