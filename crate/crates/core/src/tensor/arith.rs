//! Elementwise arithmetic, reductions and channel concatenation.

use super::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

struct AddBack;

impl<T: Scalar> Backward<T> for AddBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct SubBack;

impl<T: Scalar> Backward<T> for SubBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|&v| -v).collect()),
        ]
    }
}

struct MulBack;

impl<T: Scalar> Backward<T> for MulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct AffineBack<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for AffineBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.scale).collect())]
    }
}

struct SumBack<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for SumBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].len()])]
    }
}

struct ConcatBack {
    /// Channel count of each input.
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBack {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, total, h, w] = out.dims4().expect("concat output is 4-D");
        let plane = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut gi = Vec::with_capacity(n * c * plane);
                for s in 0..n {
                    let start = (s * total + offset) * plane;
                    gi.extend_from_slice(&g[start..start + c * plane]);
                }
                grads.push(Some(gi));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.record("add", out, vec![a, b], AddBack)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.record("sub", out, vec![a, b], SubBack)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.record("mul", out, vec![a, b], MulBack)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.record("affine", out, vec![x], AffineBack { scale })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), vec![x], SumBack { scale: T::one() })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(
            "mean",
            Tensor::scalar(s / n),
            vec![x],
            SumBack { scale: T::one() / n },
        )
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs.first().copied().ok_or_else(|| {
            Error::shape("concat_channels", "no inputs")
        })?)
        .dims4()?;
        let [n, _, h, w] = first;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {:?} does not match batch/spatial dims {:?}", self.shape(x), first),
                ));
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new([n, total, h, w], data)?;
        self.record("concat_channels", out, xs.to_vec(), ConcatBack { channels })
    }
}
