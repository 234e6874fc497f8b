use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, MatMut, MatRef, Tensor};

struct Linear;

impl<T: Element> Backward<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, f, c) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let xv = x.values();
        let wv = w.values();
        let go = ctx.grad_out;
        let dx = ctx.needs[0].then(|| {
            let mut g = vec![T::zero(); n * f];
            T::gemm(n, c, f, T::one(), MatRef::new(go, c, 1), MatRef::new(&wv, 1, c), T::zero(), MatMut::new(&mut g, f, 1));
            g
        });
        let dw = ctx.needs[1].then(|| {
            let mut g = vec![T::zero(); f * c];
            T::gemm(f, n, c, T::one(), MatRef::new(&xv, 1, f), MatRef::new(go, c, 1), T::zero(), MatMut::new(&mut g, c, 1));
            g
        });
        let db = ctx.needs[2].then(|| {
            let mut g = vec![T::zero(); c];
            for row in go.chunks(c) {
                g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            g
        });
        vec![dx, dw, db]
    }
}

impl<T: Element> Tape<T> {
    /// `x·W + b` for `x: [N, F]`, `W: [F, C]`, `b: [C]`. Rows are computed
    /// independently so results do not depend on the batch composition.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            bail!(Shape, "linear: input {:?}, weight {:?}, bias {:?} do not chain", xs, ws, bs);
        }
        let (n, f, c) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).values();
        let wv = self.value(weight).values();
        let bv = self.value(bias).values();
        let mut out = Vec::with_capacity(n * c);
        for row in xv.chunks(f) {
            let mut acc = bv.to_vec();
            for (&xi, wrow) in row.iter().zip(wv.chunks(c)) {
                acc.iter_mut().zip(wrow).for_each(|(a, &w)| *a += xi * w);
            }
            out.extend(acc);
        }
        drop((xv, wv, bv));
        let value = Tensor::from_vec(&[n, c], out)?;
        self.record(value, &[x, weight, bias], Linear)
    }
}
