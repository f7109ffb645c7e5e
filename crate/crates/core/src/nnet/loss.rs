use super::tensor::{Real, Tensor};

/// A per-sample differentiable loss over the network outputs.
pub trait Objective {
    type Target;

    /// Loss of one sample. When `grads` is given (one slice per network output),
    /// dLoss/dOutput is written into it.
    fn sample_loss<T: Real>(&self, outputs: &[&[T]], target: &Self::Target, grads: Option<&mut [&mut [T]]>) -> f64;
}

/// Mean loss over a batch (accumulated in f64) and, optionally, its gradient
/// with respect to every output.
pub fn batch_loss<T: Real, O: Objective>(
    objective: &O,
    outputs: &[Tensor<T>],
    targets: &[&O::Target],
    want_grad: bool,
) -> (f64, Option<Vec<Tensor<T>>>) {
    let n = targets.len();
    assert!(outputs.iter().all(|o| o.batch() == n), "batch size mismatch between outputs and targets");
    if n == 0 {
        return (0.0, want_grad.then(|| outputs.iter().map(|o| Tensor::zeros(o.shape().to_vec())).collect()));
    }
    let mut total = 0.0f64;
    if !want_grad {
        for (s, target) in targets.iter().enumerate() {
            let items: Vec<&[T]> = outputs.iter().map(|o| o.item(s)).collect();
            total += objective.sample_loss(&items, target, None);
        }
        return (total / n as f64, None);
    }
    let mut grads: Vec<Tensor<T>> = outputs.iter().map(|o| Tensor::zeros(o.shape().to_vec())).collect();
    let item_lens: Vec<usize> = outputs.iter().map(|o| o.item_len()).collect();
    let mut chunks: Vec<_> = grads.iter_mut().zip(&item_lens).map(|(g, &len)| g.data_mut().chunks_mut(len.max(1))).collect();
    for (s, target) in targets.iter().enumerate() {
        let items: Vec<&[T]> = outputs.iter().map(|o| o.item(s)).collect();
        let mut sample_grads: Vec<&mut [T]> = chunks.iter_mut().map(|c| c.next().expect("one chunk per sample")).collect();
        total += objective.sample_loss(&items, target, Some(&mut sample_grads));
    }
    drop(chunks);
    let scale = T::from_f64_lossy(1.0 / n as f64);
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    (total / n as f64, Some(grads))
}

/// `0.5 * sum (output - target)^2` over the single output.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl Objective for SquaredError {
    type Target = Vec<f32>;

    fn sample_loss<T: Real>(&self, outputs: &[&[T]], target: &Vec<f32>, grads: Option<&mut [&mut [T]]>) -> f64 {
        let out = outputs[0];
        let mut loss = 0.0;
        let mut diffs = Vec::with_capacity(out.len());
        for (&o, &t) in out.iter().zip(target) {
            let d = o.as_f64() - t as f64;
            loss += 0.5 * d * d;
            diffs.push(d);
        }
        if let Some(g) = grads {
            for (gv, d) in g[0].iter_mut().zip(diffs) {
                *gv = T::from_f64_lossy(d);
            }
        }
        loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryTarget {
    pub label: f32,
    pub weight: f64,
}

/// Weighted binary cross-entropy on a single probability output.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightedBce;

pub const PROB_EPS: f64 = 1e-7;

impl Objective for WeightedBce {
    type Target = BinaryTarget;

    fn sample_loss<T: Real>(&self, outputs: &[&[T]], target: &BinaryTarget, grads: Option<&mut [&mut [T]]>) -> f64 {
        let p = outputs[0][0].as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = target.label as f64;
        let loss = -target.weight * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        if let Some(g) = grads {
            g[0][0] = T::from_f64_lossy(target.weight * (p - y) / (p * (1.0 - p)));
        }
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let out = Tensor::new(vec![1, 1], vec![0.5f64]).unwrap();
        let t = BinaryTarget { label: 1.0, weight: 1.0 };
        let (l, g) = batch_loss(&WeightedBce, &[out], &[&t], true);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.unwrap()[0].data()[0] + 2.0).abs() < 1e-9);
    }
}
