use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy of `softmax(scores)` against integer labels, with the
/// gradient w.r.t. the scores. Scores are `(N, K, 1, 1)`.
pub fn softmax_cross_entropy<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k, h, w] = scores.shape();
    if h * w != 1 || labels.len() != n || n == 0 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("scores {:?} with {} labels", scores.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("softmax_cross_entropy", format!("label {bad} ≥ {k} classes")));
    }
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for ((row, g), &label) in scores.data().chunks(k).zip(grad.data_mut().chunks_mut(k)).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label].as_f64() - max);
        for (j, (gv, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            let target = if j == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((p - target) * inv_n);
        }
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::Rng;

    #[test]
    fn uniform_scores_give_ln_k() {
        let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros([3, 10, 1, 1]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_scores_give_zero() {
        let scores = Tensor::from_fn([2, 10, 1, 1], |n, c, _, _| if c == n + 3 { 1000.0f32 } else { 0.0 });
        let (loss, grad) = softmax_cross_entropy(&scores, &[3, 4]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn shift_invariance() {
        let mut rng = Rng::new(1);
        let s = Tensor::<f64>::randn([4, 10, 1, 1], 2.0, &mut rng);
        let labels = [1, 2, 3, 9];
        let (a, _) = softmax_cross_entropy(&s, &labels).unwrap();
        let (b, _) = softmax_cross_entropy(&s.map(|v| v + 37.5), &labels).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradcheck() {
        let mut rng = Rng::new(2);
        let s = Tensor::<f64>::randn([4, 10, 1, 1], 1.0, &mut rng);
        let labels = [0, 7, 3, 3];
        let (_, g) = softmax_cross_entropy(&s, &labels).unwrap();
        let num = central_difference(&s, 1e-6, |sp| softmax_cross_entropy(sp, &labels).unwrap().0);
        assert!(relative_error(g.data(), num.data()) < 1e-6);
    }

    #[test]
    fn rejects_bad_labels() {
        let s = Tensor::<f32>::zeros([2, 3, 1, 1]);
        assert!(softmax_cross_entropy(&s, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&s, &[0]).is_err());
    }
}
