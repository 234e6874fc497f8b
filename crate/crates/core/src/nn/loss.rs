use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Per-row `−log softmax(row)[label]`, computed as `logsumexp(row) − row[label]`.
pub fn cross_entropy_rows<T: Element>(logits: &[T], classes: usize, labels: &[usize]) -> Result<Vec<T>> {
    if logits.len() != classes * labels.len() {
        bail!(Shape, "{} logits for {} labels × {} classes", logits.len(), labels.len(), classes);
    }
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &label)| {
            if label >= classes {
                bail!(Data, "label {} out of range for {} classes", label, classes);
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            Ok(lse - row[label])
        })
        .collect()
}

struct SoftmaxCrossEntropy<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Element> Backward<T> for SoftmaxCrossEntropy<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = self.labels.len();
        let c = self.probs.len() / n;
        let scale = ctx.grad_out[0] / T::from_f64(n as f64);
        let mut g: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &label) in self.labels.iter().enumerate() {
            g[i * c + label] -= scale;
        }
        vec![Some(g)]
    }
}

impl<T: Element> Tape<T> {
    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            bail!(Shape, "logits {:?} do not match {} labels", t.shape(), labels.len());
        }
        let c = t.shape()[1];
        let v = t.values();
        let losses = cross_entropy_rows(&v, c, labels)?;
        let mean = losses.iter().copied().sum::<T>() / T::from_f64(labels.len() as f64);
        let probs = softmax_rows(&v, c);
        drop(v);
        self.record(Tensor::scalar(mean), &[logits], SoftmaxCrossEntropy { probs, labels: labels.to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 10]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[3, 7]).unwrap();
        assert!((tape.value(l).to_vec()[0] - 10f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).to_vec()[0] - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn large_logit_is_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![0.0, 1000.0, 0.0]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        let v = tape.value(l).to_vec()[0];
        assert!(v.is_finite() && v < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]).unwrap());
        assert!(matches!(tape.softmax_cross_entropy(x, &[3]), Err(crate::Error::Data(_))));
    }

    #[test]
    fn gradient_check_random_logits() {
        let x0 = Tensor::from_vec(&[3, 5], (0..15).map(|v| (v as f64 * 1.3).sin() * 2.0).collect()).unwrap();
        let err = grad_check(|t, x| t.softmax_cross_entropy(x, &[0, 4, 2]), &x0, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn three_logit_head() {
        let x0 = Tensor::from_vec(&[1, 3], vec![0.2, -1.1, 0.7]).unwrap();
        let err = grad_check(|t, x| t.softmax_cross_entropy(x, &[1]), &x0, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
