use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping `factor × factor` max-pooling over `[N, C, H, W]`.
///
/// The gradient goes to the first maximum of each window in row-major
/// order.
pub fn maxpool2d<'t, T: Scalar>(x: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    if xv.rank() != 4 {
        return Err(Error::invalid(format!(
            "maxpool2d expects rank 4, got {:?}",
            xv.shape()
        )));
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "maxpool2d factor {factor} does not divide spatial size {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    let src = xv.data();
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = (oy * factor) * w + ox * factor;
                let mut best = plane[best_i];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = (oy * factor + dy) * w + ox * factor + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push((p * h * w + best_i) as u32);
            }
        }
    }
    let out = Tensor::new([n, c, ho, wo], out)?;
    drop(xv);
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                gx[i as usize] += gv;
            }
            vec![Some(Tensor::new([n, c, h, w], gx).expect("shape"))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;

    #[test]
    fn two_by_two_window() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(maxpool2d(x, 2).unwrap().value().data(), &[4.0]);
    }

    #[test]
    fn ties_route_gradient_to_first_element() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 4], 5.0));
        let y = maxpool2d(x, 2).unwrap();
        assert_eq!(y.value().data(), &[5.0, 5.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 0., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn matches_naive_window_max() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let y = maxpool2d(tape.constant(x.clone()), 2).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.at(&[b, c, 2 * oy + dy, 2 * ox + dx]));
                            }
                        }
                        assert_eq!(y.value().at(&[b, c, oy, ox]), m);
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_size_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 5, 4]));
        assert!(maxpool2d(x, 2).is_err());
    }
}
