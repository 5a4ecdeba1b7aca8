//! Deep bilateral operator: channel-wise bilateral filtering of feature maps,
//! differentiable through the Gaussian weights.

use serde::{Deserialize, Serialize};

use super::gaussian;
use crate::error::{Error, Result};
use crate::tensor::{Backward, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DboParams {
    /// Range scale in feature units.
    pub sigma_r: f64,
    /// Odd neighbourhood side.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Multiply in the spatial Gaussian as well.
    #[serde(default)]
    pub use_spatial: bool,
    /// Spatial scale in pixels; read only when `use_spatial`.
    #[serde(default = "default_sigma_s")]
    pub sigma_s: f64,
}

fn default_window() -> usize {
    3
}

fn default_sigma_s() -> f64 {
    1.0
}

impl Default for DboParams {
    fn default() -> Self {
        DboParams {
            sigma_r: 1.0,
            window: 3,
            use_spatial: false,
            sigma_s: 1.0,
        }
    }
}

impl DboParams {
    pub fn range_only(sigma_r: f64) -> Self {
        DboParams {
            sigma_r,
            ..Default::default()
        }
    }

    pub fn full(sigma_r: f64, sigma_s: f64) -> Self {
        DboParams {
            sigma_r,
            use_spatial: true,
            sigma_s,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_r > 0.0) {
            return Err(Error::InvalidParam(format!("DBO sigma_r must be > 0, got {}", self.sigma_r)));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!("DBO window must be odd, got {}", self.window)));
        }
        if self.use_spatial && !(self.sigma_s > 0.0) {
            return Err(Error::InvalidParam(format!("DBO sigma_s must be > 0, got {}", self.sigma_s)));
        }
        Ok(())
    }

    /// Spatial weight per window offset, row-major; all ones when range-only.
    fn spatial_table(&self) -> Vec<f64> {
        let side = self.window;
        let r = (side / 2) as f64;
        (0..side * side)
            .map(|i| {
                if !self.use_spatial {
                    return 1.0;
                }
                let dy = (i / side) as f64 - r;
                let dx = (i % side) as f64 - r;
                gaussian((dy * dy + dx * dx).sqrt(), self.sigma_s)
            })
            .collect()
    }
}

/// Calls `visit(q, weight)` for every valid neighbour `q` (flat index within
/// the plane) of pixel `(y, x)`.
#[inline]
fn for_window<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    p: &DboParams,
    spatial: &[f64],
    mut visit: impl FnMut(usize, T),
) {
    let r = p.window / 2;
    let inv_sr2 = T::lit(1.0 / (p.sigma_r * p.sigma_r));
    let centre = plane[y * w + x];
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    for qy in y0..=y1 {
        let row = (qy + r - y) * p.window;
        for qx in x0..=x1 {
            let q = qy * w + qx;
            let d = centre - plane[q];
            let wt = (-(d * d) * inv_sr2).exp() * T::lit(spatial[row + qx + r - x]);
            visit(q, wt);
        }
    }
}

/// Forward pass without recording. Handles both the range-only and the
/// spatial variant according to `p.use_spatial`.
pub fn dbo_forward<T: Scalar>(x: &Tensor<T>, p: &DboParams) -> Result<Tensor<T>> {
    p.validate()?;
    let [n, c, h, w] = x.dims4()?;
    let spatial = p.spatial_table();
    let plane_len = h * w;
    let mut out = vec![T::zero(); x.len()];
    for pi in 0..n * c {
        let plane = &x.data()[pi * plane_len..(pi + 1) * plane_len];
        let dst = &mut out[pi * plane_len..(pi + 1) * plane_len];
        for y in 0..h {
            for xx in 0..w {
                let (mut num, mut den) = (T::zero(), T::zero());
                for_window(plane, h, w, y, xx, p, &spatial, |q, wt| {
                    num += wt * plane[q];
                    den += wt;
                });
                dst[y * w + xx] = num / den;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct DboBack {
    params: DboParams,
}

impl<T: Scalar> Backward<T> for DboBack {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims4().expect("dbo input is 4-D");
        let p = &self.params;
        let spatial = p.spatial_table();
        let two_inv_sr2 = T::lit(2.0 / (p.sigma_r * p.sigma_r));
        let plane_len = h * w;
        let mut gx = vec![T::zero(); x.len()];
        for pi in 0..n * c {
            let off = pi * plane_len;
            let plane = &x.data()[off..off + plane_len];
            let outp = &out.data()[off..off + plane_len];
            let gp = &g[off..off + plane_len];
            let gxp = &mut gx[off..off + plane_len];
            for y in 0..h {
                for xx in 0..w {
                    let pidx = y * w + xx;
                    let gout = gp[pidx];
                    if gout == T::zero() {
                        continue;
                    }
                    let fp = plane[pidx];
                    let mut k = T::zero();
                    for_window(plane, h, w, y, xx, p, &spatial, |_, wt| k += wt);
                    let scale = gout / k;
                    let o = outp[pidx];
                    for_window(plane, h, w, y, xx, p, &spatial, |q, wt| {
                        let fq = plane[q];
                        // through the value being averaged
                        gxp[q] += scale * wt;
                        // through the weight: d w/d fp = -2 (fp - fq)/σ² · w
                        let t = scale * (fq - o) * wt * (-(two_inv_sr2) * (fp - fq));
                        gxp[pidx] += t;
                        gxp[q] -= t;
                    });
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Records the operator, dispatching on `p.use_spatial`.
pub fn apply_dbo<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DboParams) -> Result<Var> {
    let out = dbo_forward(tape.value(x), p)?;
    tape.record("dbo", out, vec![x], DboBack { params: *p })
}

/// Range-only operator.
pub fn dbo<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DboParams) -> Result<Var> {
    if p.use_spatial {
        return Err(Error::InvalidParam("dbo expects use_spatial = false; use dbo_full".into()));
    }
    apply_dbo(tape, x, p)
}

/// Operator with the extra spatial Gaussian.
pub fn dbo_full<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DboParams) -> Result<Var> {
    if !p.use_spatial {
        return Err(Error::InvalidParam("dbo_full expects use_spatial = true".into()));
    }
    apply_dbo(tape, x, p)
}
