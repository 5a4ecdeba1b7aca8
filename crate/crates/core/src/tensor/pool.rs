use super::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// 2×2 non-overlapping max pooling. Returns the pooled tensor and, per
/// output element, the flat input index it was taken from. Ties resolve to
/// the first element in row-major scan order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avgpool",
            format!("{h}x{w} is not divisible by pool factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..h {
            for xi in 0..w {
                out[(plane * oh + y / factor) * ow + xi / factor] += src[(plane * h + y) * w + xi];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new([n, c, oh, ow], out)
}

struct MaxPoolBack {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); inputs[0].len()];
        for (&i, &gv) in self.argmax.iter().zip(g) {
            gx[i] += gv;
        }
        vec![Some(gx)]
    }
}

struct AvgPoolBack {
    factor: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].dims4().expect("avgpool input is 4-D");
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        let inv = T::one() / T::from_usize(f * f).unwrap();
        let mut gx = vec![T::zero(); inputs[0].len()];
        for plane in 0..n * c {
            for y in 0..h {
                for xi in 0..w {
                    gx[(plane * h + y) * w + xi] = g[(plane * oh + y / f) * ow + xi / f] * inv;
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(self.value(x))?;
        self.record("maxpool2", out, vec![x], MaxPoolBack { argmax })
    }

    pub fn avgpool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = avgpool_forward(self.value(x), factor)?;
        self.record("avgpool", out, vec![x], AvgPoolBack { factor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_max_of_block() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn constant_map_halves() {
        let x = Tensor::<f32>::full([2, 3, 6, 4], 1.5);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn ties_route_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([1, 1, 2, 2], 2.0));
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(maxpool2_forward(&x).is_err());
        assert!(avgpool_forward(&x, 2).is_err());
    }

    #[test]
    fn avgpool_means_blocks() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| i as f64);
        let y = avgpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
