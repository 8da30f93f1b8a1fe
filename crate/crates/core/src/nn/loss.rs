use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean negative log-likelihood of `targets` under `softmax(logits)`.
///
/// `logits: [N, K]`. Max-subtraction keeps large logits finite.
pub fn softmax_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    let lv = logits.value();
    if lv.rank() != 2 || lv.shape()[0] != targets.len() {
        return Err(Error::invalid(format!(
            "cross entropy: logits {:?} vs {} targets",
            lv.shape(),
            targets.len()
        )));
    }
    let (n, k) = (lv.shape()[0], lv.shape()[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target {bad} out of range for {k} classes")));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (i, row) in lv.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = &mut probs[i * k..(i + 1) * k];
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
        loss += z.ln() + max - row[targets[i]];
    }
    let nf = T::lit(n as f64);
    let out = Tensor::scalar(loss / nf);
    let targets = targets.to_vec();
    drop(lv);
    Ok(logits.tape().push(
        out,
        &[logits],
        Box::new(move |g, _| {
            let scale = g.item() / nf;
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * k + t] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new([n, k], gx).expect("shape"))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_two_class() {
        let tape = Tape::<f64>::new();
        let l = softmax_cross_entropy(tape.constant(Tensor::zeros([1, 2])), &[0]).unwrap();
        assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn huge_logit_stays_finite() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 2], vec![1000.0, 0.0]).unwrap());
        let l = softmax_cross_entropy(x, &[0]).unwrap();
        assert!(l.value().item().abs() < 1e-6);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn out_of_range_target() {
        let tape = Tape::<f64>::new();
        assert!(softmax_cross_entropy(tape.constant(Tensor::zeros([1, 3])), &[3]).is_err());
    }
}
