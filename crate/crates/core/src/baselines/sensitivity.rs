//! Sensitivity analysis: relevance from the squared input gradient.

use crate::network::Network;
use crate::relevance::{Heatmap, HeatmapSource, LayerSum, Result};
use crate::tensor::Tensor;

/// Step length `δ` of the raw variant. Moving from `x` by `−δ ∇f` changes
/// the first-order expansion by `δ ‖∇f‖²`, which is what the raw heatmap
/// distributes.
pub const DEFAULT_SENSITIVITY_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SensitivityMode {
    /// `R_p = δ (∂f/∂x_p)²`.
    Raw { step: f64 },
    /// Squared gradient scaled so that `Σ_p R_p = f(x)`; for display only.
    Rescaled,
}

impl Default for SensitivityMode {
    fn default() -> Self {
        Self::Raw {
            step: DEFAULT_SENSITIVITY_STEP,
        }
    }
}

pub fn sensitivity_heatmap(net: &Network, x: &Tensor, mode: SensitivityMode) -> Result<Heatmap> {
    let trace = net.forward(x)?;
    let f = trace.output();
    let g = net.gradient_from_trace(&trace)?;
    let squared = g.mul(&g)?;
    let total = squared.sum();
    let (scale, raw) = match mode {
        SensitivityMode::Raw { step } => (step, true),
        SensitivityMode::Rescaled if total > 0.0 => (f / total, false),
        SensitivityMode::Rescaled => (0.0, false),
    };
    let relevance = squared.scale(scale).reshape(net.input_shape().to_vec())?;
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
        source: HeatmapSource::Sensitivity { raw, scale },
        layer_sums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DetectionLayer, PoolingLayer};

    fn net(bias: f64) -> Network {
        Network::from_blocks(
            vec![2],
            vec![(
                DetectionLayer::new(
                    Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
                    Tensor::vector(vec![bias, bias]).unwrap(),
                    true,
                )
                .unwrap(),
                PoolingLayer::sum(2).unwrap(),
            )],
            None,
        )
        .unwrap()
    }

    #[test]
    fn dead_region_gives_zero_heatmap() {
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        for mode in [SensitivityMode::default(), SensitivityMode::Rescaled] {
            let h = sensitivity_heatmap(&net(-100.0), &x, mode).unwrap();
            assert!(h.relevance.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_region_squares_weight_sums() {
        // Both units active: ∂f/∂x = row sums of W = (3, -0.5).
        let x = Tensor::vector(vec![1.0, 0.5]).unwrap();
        let h = sensitivity_heatmap(&net(0.0), &x, SensitivityMode::Raw { step: 1.0 }).unwrap();
        assert_eq!(h.relevance.data(), &[9.0, 0.25]);
        let h = sensitivity_heatmap(&net(0.0), &x, SensitivityMode::default()).unwrap();
        assert!((h.total() - DEFAULT_SENSITIVITY_STEP * 9.25).abs() < 1e-15);
        assert!(h.total() < h.output);
        let h = sensitivity_heatmap(&net(0.0), &x, SensitivityMode::Rescaled).unwrap();
        assert!((h.total() - h.output).abs() < 1e-12);
        assert!((h.relevance.data()[0] / h.relevance.data()[1] - 36.0).abs() < 1e-9);
    }
}
