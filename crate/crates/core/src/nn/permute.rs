use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

/// Source channel for each output channel of a grouped shuffle: view the
/// channels as `(groups, C/groups)`, transpose, flatten.
pub fn shuffle_order(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        bail!(Shape, "{} channels cannot be split into {} groups", channels, groups);
    }
    let per = channels / groups;
    Ok((0..per).flat_map(|a| (0..groups).map(move |b| b * per + a)).collect())
}

fn gather_channels<T: Element>(src: &[T], n: usize, plane: usize, order: &[usize]) -> Vec<T> {
    let c = order.len();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for &from in order {
            out.extend_from_slice(&src[(b * c + from) * plane..(b * c + from + 1) * plane]);
        }
    }
    out
}

struct ChannelPermute {
    inverse: Vec<usize>,
}

impl<T: Element> Backward<T> for ChannelPermute {
    fn name(&self) -> &'static str {
        "channel_permute"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let s = ctx.output.shape();
        vec![Some(gather_channels(ctx.grad_out, s[0], s[2] * s[3], &self.inverse))]
    }
}

impl<T: Element> Tape<T> {
    /// Grouped channel shuffle; `channel_permute(·, C/g)` undoes `channel_permute(·, g)`.
    pub fn channel_permute(&mut self, x: Var, groups: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 {
            bail!(Shape, "channel_permute expects [N,C,H,W], got {:?}", t.shape());
        }
        let shape = t.shape().to_vec();
        let order = shuffle_order(shape[1], groups)?;
        if groups == 1 {
            return Ok(x);
        }
        let mut inverse = vec![0; order.len()];
        for (to, &from) in order.iter().enumerate() {
            inverse[from] = to;
        }
        let data = gather_channels(&t.values(), shape[0], shape[2] * shape[3], &order);
        let value = Tensor::from_vec(&shape, data)?;
        self.record(value, &[x], ChannelPermute { inverse })
    }
}
