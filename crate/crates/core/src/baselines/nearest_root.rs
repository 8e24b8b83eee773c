//! First-order Taylor decomposition at a nearby root found by a penalty
//! method: minimize `½‖ξ − x‖² + ½ μ f(ξ)²` with growing `μ`, projecting
//! into the pixel box after every step.

use crate::network::{Network, PixelBounds};
use crate::relevance::{Heatmap, HeatmapSource, LayerSum, RelevanceError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RootSearchConfig {
    /// Fraction of the Gauss-Newton step taken each iteration.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once `f(ξ) < stop_ratio · f(x)`.
    pub stop_ratio: f64,
    pub initial_penalty: f64,
    /// `μ` is multiplied by `penalty_growth` every `penalty_interval` steps.
    pub penalty_growth: f64,
    pub penalty_interval: usize,
    /// Box the root must lie in; `None` uses the network's pixel bounds.
    pub bounds: Option<PixelBounds>,
}

impl Default for RootSearchConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            max_iterations: 1000,
            stop_ratio: 0.1,
            initial_penalty: 1.0,
            penalty_growth: 2.0,
            penalty_interval: 50,
            bounds: None,
        }
    }
}

impl RootSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RelevanceError::InvalidRule(m));
        if !(self.stop_ratio > 0.0 && self.stop_ratio < 1.0) {
            return bad(format!("stop ratio must lie in (0, 1), got {}", self.stop_ratio));
        }
        if self.max_iterations == 0 || self.penalty_interval == 0 {
            return bad("iteration counts must be positive".into());
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return bad(format!("step size must lie in (0, 1], got {}", self.step_size));
        }
        if !(self.initial_penalty > 0.0) || !(self.penalty_growth >= 1.0) {
            return bad("penalty must start positive and never shrink".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RootSearch {
    pub root: Tensor,
    /// `f` at the root.
    pub output: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Searches for a point near `x` where `f` has dropped below
/// `stop_ratio · f(x)`. Each step applies the Gauss-Newton direction of the
/// penalized objective, `H⁻¹ g` with `H = I + μ ∇f ∇fᵀ` inverted by
/// Sherman–Morrison.
pub fn nearest_root(net: &Network, x: &Tensor, cfg: &RootSearchConfig) -> Result<RootSearch> {
    cfg.validate()?;
    let bounds = cfg.bounds.as_ref().or(net.bounds());
    let mut trace = net.forward(x)?;
    let f0 = trace.output();
    let target = cfg.stop_ratio * f0;
    let x0 = x.flatten();
    let mut xi = x0.data().to_vec();
    let mut mu = cfg.initial_penalty;
    let mut f = f0;
    let mut iterations = 0;
    while f > 0.0 && f >= target && iterations < cfg.max_iterations {
        if iterations > 0 && iterations % cfg.penalty_interval == 0 {
            mu *= cfg.penalty_growth;
        }
        let grad = net.gradient_from_trace(&trace)?;
        let gd = grad.data();
        let g: Vec<f64> = xi
            .iter()
            .zip(x0.data())
            .zip(gd)
            .map(|((&a, &b), &df)| (a - b) + mu * f * df)
            .collect();
        let gg: f64 = gd.iter().map(|v| v * v).sum();
        let dg: f64 = gd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let k = mu * dg / (1.0 + mu * gg);
        for i in 0..xi.len() {
            xi[i] -= cfg.step_size * (g[i] - k * gd[i]);
            if let Some(b) = bounds {
                xi[i] = xi[i].clamp(b.low().data()[i], b.high().data()[i]);
            }
        }
        iterations += 1;
        trace = net.forward(&Tensor::new(x.shape().to_vec(), xi.clone())?)?;
        f = trace.output();
    }
    Ok(RootSearch {
        root: Tensor::new(x.shape().to_vec(), xi)?,
        output: f,
        iterations,
        converged: f0 <= 0.0 || f < target,
    })
}

/// `R_p = ∂f/∂x_p |_{x̃} · (x_p − x̃_p)` at the root found by [`nearest_root`].
/// An unconverged search still yields a heatmap, flagged in its source.
pub fn nearest_root_taylor(net: &Network, x: &Tensor, cfg: &RootSearchConfig) -> Result<Heatmap> {
    let f = net.output(x)?;
    let search = nearest_root(net, x, cfg)?;
    let grad = net.gradient(&search.root)?;
    let relevance = grad.mul(&x.sub(&search.root)?)?.reshape(net.input_shape().to_vec())?;
    let layer_sums = vec![
        LayerSum {
            layer: net.layers().len(),
            relevance: f,
            bias: 0.0,
        },
        LayerSum {
            layer: 0,
            relevance: relevance.sum(),
            bias: 0.0,
        },
    ];
    Ok(Heatmap {
        relevance,
        output: f,
        source: HeatmapSource::NearestRoot {
            root_output: search.output,
            iterations: search.iterations,
            converged: search.converged,
        },
        layer_sums,
    })
}
