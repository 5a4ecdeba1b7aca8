use super::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::Result;

struct ReluBack;

impl<T: Scalar> Backward<T> for ReluBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        )]
    }
}

struct SigmoidBack;

impl<T: Scalar> Backward<T> for SigmoidBack {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        )]
    }
}

struct SoftmaxBack;

impl<T: Scalar> Backward<T> for SoftmaxBack {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = out.dims4().expect("softmax output is 4-D");
        let plane = h * w;
        let y = out.data();
        let mut gx = vec![T::zero(); y.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut dot = T::zero();
                for k in 0..c {
                    let i = base + k * plane + p;
                    dot += g[i] * y[i];
                }
                for k in 0..c {
                    let i = base + k * plane + p;
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax over the channel axis of an NCHW buffer, per spatial location.
pub fn softmax_channel_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(src[base + k * plane + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (src[base + k * plane + p] - max).exp();
                out[base + k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * plane + p] = out[base + k * plane + p] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record("relu", out, vec![x], ReluBack)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.record("sigmoid", out, vec![x], SigmoidBack)
    }

    /// Softmax across channels of an NCHW tensor, independently per pixel.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channel_forward(self.value(x))?;
        self.record("softmax_channel", out, vec![x], SoftmaxBack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([3], vec![-1.0, 2.0, 0.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let k2 = 25;
        let x = Tensor::<f64>::full([1, k2, 3, 3], 0.7);
        let y = softmax_channel_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / k2 as f64).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = Tensor::<f32>::uniform([2, 9, 4, 5], -8.0, 8.0, &mut rng);
            let y = softmax_channel_forward(&x).unwrap();
            for s in 0..2 {
                for p in 0..20 {
                    let total: f64 = (0..9).map(|k| y.data()[(s * 9 + k) * 20 + p] as f64).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
            assert!(y.data().iter().all(|&v| v > 0.0));
        }
    }
}
