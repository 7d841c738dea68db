//! Binary cross-entropy and the deep-supervision composite loss.

use alloc::format;

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::Outputs;
use crate::tensor::{Shape, Tensor};

pub const AUX2_WEIGHT: f64 = 0.4;
pub const AUX4_WEIGHT: f64 = 0.2;
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub aux_enabled: bool,
    /// Weight of the 1/2-resolution branch.
    pub aux2_weight: f64,
    /// Weight of the 1/4-resolution branch.
    pub aux4_weight: f64,
    pub clamp_eps: f64,
}

impl LossConfig {
    pub fn new(aux_enabled: bool) -> Self {
        LossConfig { aux_enabled, aux2_weight: AUX2_WEIGHT, aux4_weight: AUX4_WEIGHT, clamp_eps: CLAMP_EPS }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(true)
    }
}

/// Mean binary cross-entropy over every element of `p`.
pub fn bce<T: Element>(g: &mut Graph<T>, p: Var, y: &Tensor<T>, clamp_eps: f64) -> Result<Var> {
    g.bce(p, y, T::from_f64(clamp_eps))
}

/// Nearest-neighbour subsampling of a target map: each `factor x factor` cell
/// keeps its top-left value, so binary masks stay binary.
pub fn downsample_target<T: Element>(y: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    if factor == 0 || !s.h().is_multiple_of(factor) || !s.w().is_multiple_of(factor) {
        return Err(Error::shape("downsample_target", format!("{s} is not divisible by {factor}")));
    }
    let out = Shape::new(s.n(), s.c(), s.h() / factor, s.w() / factor);
    let mut t = Tensor::zeros(out);
    for n in 0..s.n() {
        for c in 0..s.c() {
            for i in 0..out.h() {
                for j in 0..out.w() {
                    t.set(n, c, i, j, y.get(n, c, i * factor, j * factor));
                }
            }
        }
    }
    Ok(t)
}

/// Graph handles of the individual loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub main: Var,
    pub aux2: Option<Var>,
    pub aux4: Option<Var>,
    pub total: Var,
}

/// `L(main, y) + 0.4 L(aux2, y/2) + 0.2 L(aux4, y/4)`, or `L(main, y)` alone
/// when auxiliary supervision is off (in which case `total == main`).
pub fn total_loss<T: Element>(g: &mut Graph<T>, out: &Outputs, y: &Tensor<T>, cfg: &LossConfig) -> Result<LossTerms> {
    let main = bce(g, out.main, y, cfg.clamp_eps)?;
    if !cfg.aux_enabled {
        return Ok(LossTerms { main, aux2: None, aux4: None, total: main });
    }
    let (Some(p2), Some(p4)) = (out.aux2, out.aux4) else {
        return Err(Error::invalid("auxiliary loss enabled but the auxiliary heads were not evaluated"));
    };
    let aux2 = bce(g, p2, &downsample_target(y, 2)?, cfg.clamp_eps)?;
    let aux4 = bce(g, p4, &downsample_target(y, 4)?, cfg.clamp_eps)?;
    let w2 = g.scale(aux2, T::from_f64(cfg.aux2_weight));
    let w4 = g.scale(aux4, T::from_f64(cfg.aux4_weight));
    let partial = g.add(main, w2)?;
    let total = g.add(partial, w4)?;
    Ok(LossTerms { main, aux2: Some(aux2), aux4: Some(aux4), total })
}
