//! Per-channel batch normalization with running statistics.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// Learnable affine parameters plus running statistics of one batch-norm
/// layer. The tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Running-statistics update produced by a training forward pass. Applied
/// with [`RunningUpdate::apply`] once the pass is done.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T: Scalar> {
    mean_id: ParamId,
    var_id: ParamId,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
    momentum: T,
}

impl<T: Scalar> RunningUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in store.get_mut(self.mean_id).data_mut().iter_mut().zip(&self.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store
            .get_mut(self.var_id)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var_unbiased)
        {
            *r = keep * *r + m * b;
        }
    }
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones([channels])),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Normalizes `x: [N, C, H, W]`. In train mode the returned update must be
    /// applied to the store for the running statistics to advance.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Option<RunningUpdate<T>>)> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var_unbiased) = batchnorm_train(x, gamma, beta, T::lit(self.eps))?;
                Ok((
                    y,
                    Some(RunningUpdate {
                        mean_id: self.running_mean,
                        var_id: self.running_var,
                        batch_mean: mean,
                        batch_var_unbiased: var_unbiased,
                        momentum: T::lit(self.momentum),
                    }),
                ))
            }
            Mode::Eval => {
                let y = batchnorm_eval(
                    x,
                    gamma,
                    beta,
                    store.get(self.running_mean),
                    store.get(self.running_var),
                    T::lit(self.eps),
                )?;
                Ok((y, None))
            }
        }
    }
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::invalid(format!("batchnorm expects rank 4, got {:?}", x.shape())));
    }
    let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm affine", x.shape(), gamma.shape()));
    }
    Ok((n, c, hw))
}

/// Training-mode normalization. Returns the output, the batch mean and the
/// unbiased batch variance.
pub fn batchnorm_train<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (n, c, hw) = check_shapes(&xv, &gv, &bv)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::invalid(format!(
            "batchnorm in train mode needs at least 2 values per channel, got {m}"
        )));
    }
    let mf = T::lit(m as f64);
    let src = xv.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &src[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                q += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for ((xh, o), &v) in xhat[range.clone()]
                .iter_mut()
                .zip(&mut out[range.clone()])
                .zip(&src[range])
            {
                *xh = (v - mu) * is;
                *o = *xh * ga + be;
            }
        }
    }
    let shape = xv.shape().to_vec();
    let out = Tensor::new(shape.clone(), out)?;
    let unbiased: Vec<T> = var.iter().map(|&v| v * mf / T::lit((m - 1) as f64)).collect();
    let gamma_vals = gv.data().to_vec();
    drop((xv, gv, bv));
    let y = x.tape().push(
        out,
        &[x, gamma, beta],
        Box::new(move |g, mask| {
            let gd = g.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for (&gg, &xh) in gd[range.clone()].iter().zip(&xhat[range]) {
                        sum_g[ch] += gg;
                        sum_gx[ch] += gg * xh;
                    }
                }
            }
            let gx = mask[0].then(|| {
                let mut gx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let k = gamma_vals[ch] * inv_std[ch] / mf;
                        let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                        for ((dst, &gg), &xh) in gx[range.clone()].iter_mut().zip(&gd[range.clone()]).zip(&xhat[range])
                        {
                            *dst = k * (mf * gg - sg - xh * sgx);
                        }
                    }
                }
                Tensor::new(shape.clone(), gx).expect("shape")
            });
            vec![
                gx,
                mask[1].then(|| Tensor::new([c], sum_gx.clone()).expect("shape")),
                mask[2].then(|| Tensor::new([c], sum_g.clone()).expect("shape")),
            ]
        }),
    );
    Ok((y, mean, unbiased))
}

/// Eval-mode normalization with fixed statistics.
pub fn batchnorm_eval<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (n, c, hw) = check_shapes(&xv, &gv, &bv)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape(
            "batchnorm running stats",
            xv.shape(),
            running_mean.shape(),
        ));
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mean = running_mean.data().to_vec();
    let src = xv.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for (o, &v) in out[range.clone()].iter_mut().zip(&src[range]) {
                *o = (v - mu) * is * ga + be;
            }
        }
    }
    let shape = xv.shape().to_vec();
    let out = Tensor::new(shape.clone(), out)?;
    let gamma_vals = gv.data().to_vec();
    drop(gv);
    drop(bv);
    Ok(x.tape().push(
        out,
        &[x, gamma, beta],
        Box::new(move |g, mask| {
            let gd = g.data();
            let src = xv.data();
            let gx = mask[0].then(|| {
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let k = gamma_vals[ch] * inv_std[ch];
                        for (dst, &gg) in gx[range.clone()].iter_mut().zip(&gd[range]) {
                            *dst = k * gg;
                        }
                    }
                }
                Tensor::new(shape.clone(), gx).expect("shape")
            });
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            if mask[1] || mask[2] {
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&gg, &v) in gd[range.clone()].iter().zip(&src[range]) {
                            sum_g[ch] += gg;
                            sum_gx[ch] += gg * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
            }
            vec![
                gx,
                mask[1].then(|| Tensor::new([c], sum_gx).expect("shape")),
                mask[2].then(|| Tensor::new([c], sum_g).expect("shape")),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn channel_stats(y: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (n, c, hw) = (y.shape()[0], y.shape()[1], y.shape()[2] * y.shape()[3]);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|b| y.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v.sqrt())
            })
            .collect()
    }

    fn setup(gamma: f64, beta: f64) -> (ParamStore<f64>, BatchNorm, Tensor<f64>) {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.set(bn.gamma, Tensor::full([3], gamma));
        store.set(bn.beta, Tensor::full([3], beta));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn([4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        (store, bn, x)
    }

    #[test]
    fn train_mode_standardizes() {
        let (store, bn, x) = setup(1.0, 0.0);
        let tape = Tape::new();
        let (y, _) = bn.forward(&tape, &store, tape.constant(x), Mode::Train).unwrap();
        for (m, s) in channel_stats(&y.value()) {
            assert!(m.abs() < 1e-10);
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn affine_shifts_and_scales() {
        let (store, bn, x) = setup(2.0, 3.0);
        let tape = Tape::new();
        let (y, _) = bn.forward(&tape, &store, tape.constant(x), Mode::Train).unwrap();
        for (m, s) in channel_stats(&y.value()) {
            assert!((m - 3.0).abs() < 1e-10);
            assert!((s - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let (mut store, bn, x) = setup(1.5, -0.5);
        store.set(bn.running_mean, Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        store.set(bn.running_var, Tensor::new([3], vec![4.0, 0.25, 1.0]).unwrap());
        let tape = Tape::new();
        let (y, upd) = bn.forward(&tape, &store, tape.constant(x.clone()), Mode::Eval).unwrap();
        assert!(upd.is_none());
        let mu = [1.0, 2.0, 3.0];
        let var = [4.0, 0.25, 1.0];
        for b in 0..4 {
            for c in 0..3 {
                for p in 0..5 {
                    let v = x.at(&[b, c, p, 1]);
                    let expect = (v - mu[c]) / (var[c] + 1e-5f64).sqrt() * 1.5 - 0.5;
                    assert!((y.value().at(&[b, c, p, 1]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut store, bn, x) = setup(1.0, 0.0);
        let tape = Tape::new();
        let (_, upd) = bn
            .forward(&tape, &store, tape.constant(x.clone()), Mode::Train)
            .unwrap();
        drop(tape);
        upd.unwrap().apply(&mut store);
        let n = 4.0 * 25.0;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| x.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((store.get(bn.running_mean).data()[ch] - 0.1 * m).abs() < 1e-12);
            assert!((store.get(bn.running_var).data()[ch] - (0.9 + 0.1 * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_batch_is_rejected_in_train_mode() {
        let (store, bn, _) = setup(1.0, 0.0);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        assert!(bn.forward(&tape, &store, x, Mode::Train).is_err());
        assert!(bn.forward(&tape, &store, x, Mode::Eval).is_ok());
    }
}
