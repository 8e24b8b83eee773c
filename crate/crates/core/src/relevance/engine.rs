//! Layer-by-layer backward pass from the output relevance down to the
//! pixels, with domain checks and a per-boundary audit trail.

use super::rules::{pool_redistribute, propagate};
use super::{Heatmap, HeatmapSource, LayerSum, RelevanceError, Result, RuleAssignment, RuleKind};
use crate::network::{ActivationTrace, Layer, Network};
use crate::tensor::Tensor;

/// Largest negative relevance accepted by the root-point rules, relative to
/// the magnitude of the relevance vector. Absorbs rounding noise only.
pub fn negative_tolerance(scale: f64) -> f64 {
    1e-9 * scale.max(1.0)
}

impl RelevanceError {
    /// Rewrites the layer index of layer-specific errors.
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            Self::Domain { rule, reason, .. } => Self::Domain {
                layer: index,
                rule,
                reason,
            },
            Self::PositiveBias { unit, value, .. } => Self::PositiveBias {
                layer: index,
                unit,
                value,
            },
            Self::NegativeRelevance { unit, value, .. } => Self::NegativeRelevance {
                layer: index,
                unit,
                value,
            },
            Self::NegativeActivation { unit, value, .. } => Self::NegativeActivation {
                layer: index,
                unit,
                value,
            },
            other => other,
        }
    }
}

fn check_nonnegative(r: &Tensor, layer: usize) -> Result<()> {
    let tol = negative_tolerance(r.max_abs());
    match r.data().iter().enumerate().find(|(_, &v)| v < -tol) {
        Some((unit, &value)) => Err(RelevanceError::NegativeRelevance { layer, unit, value }),
        None => Ok(()),
    }
}

/// Structural domain checks that do not depend on the particular input.
pub(crate) fn check_domain(net: &Network, rules: &RuleAssignment, block: usize, layer: usize) -> Result<()> {
    let rule = &rules.rules()[block];
    let domain = |reason: String| RelevanceError::Domain {
        layer,
        rule: rule.name().into(),
        reason,
    };
    match rule.kind() {
        RuleKind::ZPlus if block == 0 => match net.bounds() {
            None => Err(domain("inputs are unbounded and may be negative".into())),
            Some(b) if b.low().min() < 0.0 => Err(domain(format!(
                "inputs may be negative (lower bound {}); use zbox or w2",
                b.low().min()
            ))),
            Some(_) => Ok(()),
        },
        RuleKind::ZBox { bounds: None } if block == 0 && net.bounds().is_none() => {
            Err(domain("the network has no pixel bounds; give zbox explicit l:h".into()))
        }
        RuleKind::ZBox { bounds: None } if block > 0 => Err(domain(format!(
            "only the first layer has known bounds; give zbox:{block}=l:h"
        ))),
        _ => Ok(()),
    }
}

impl RuleAssignment {
    /// Input-independent checks against `net`: rule count, domains and
    /// positive biases under root-point rules.
    pub fn validate(&self, net: &Network) -> Result<()> {
        self.check_len(net)?;
        for (block, (_, det, _)) in net.blocks().enumerate() {
            let layer = 2 * block;
            check_domain(net, self, block, layer)?;
            let rule = &self.rules()[block];
            if rule.is_deep_taylor() && !rule.absorbs_positive_bias() {
                if let Some((unit, &value)) = det.biases().data().iter().enumerate().find(|(_, &b)| b > 0.0) {
                    return Err(RelevanceError::PositiveBias { layer, unit, value });
                }
            }
        }
        Ok(())
    }
}

/// Propagates `r_top`, the relevance on the input of layer `top` (the
/// output when `top` equals the layer count), down to the input of layer
/// `stop`. Boundary totals are appended to `sums`.
pub fn backward(
    net: &Network,
    trace: &ActivationTrace,
    rules: &RuleAssignment,
    top: usize,
    r_top: Tensor,
    stop: usize,
    sums: &mut Vec<LayerSum>,
) -> Result<Tensor> {
    rules.check_len(net)?;
    let mut r = r_top;
    for li in (stop..top).rev() {
        let block = li / 2;
        let rule = &rules.rules()[block];
        let x = trace.layer_input(li);
        let (next, bias) = match &net.layers()[li] {
            Layer::Pooling(pool) => {
                if rule.is_deep_taylor() {
                    check_nonnegative(&r, li)?;
                }
                if let Some((unit, &value)) = x.data().iter().enumerate().find(|(_, &v)| v < 0.0) {
                    return Err(RelevanceError::NegativeActivation { layer: li, unit, value });
                }
                (pool_redistribute(pool, x, &r).map_err(|e| e.at_layer(li))?, 0.0)
            }
            Layer::Detection(det) => {
                check_domain(net, rules, block, li)?;
                if rule.is_deep_taylor() {
                    check_nonnegative(&r, li)?;
                }
                let fallback = if block == 0 { net.bounds() } else { None };
                let p = propagate(rule, det, &x.flatten(), &r, fallback).map_err(|e| e.at_layer(li))?;
                (p.input, p.bias.sum())
            }
        };
        r = next;
        sums.push(LayerSum {
            layer: li,
            relevance: r.sum(),
            bias,
        });
    }
    Ok(r)
}

/// Decomposes `f(x)` recorded in `trace` into pixel relevances. Any LRP
/// rule in the assignment marks the result as an LRP heatmap.
pub fn deep_taylor(net: &Network, trace: &ActivationTrace, rules: &RuleAssignment) -> Result<Heatmap> {
    rules.check_len(net)?;
    let top = net.layers().len();
    let f = trace.output();
    let mut sums = vec![LayerSum {
        layer: top,
        relevance: f,
        bias: 0.0,
    }];
    let r = backward(net, trace, rules, top, Tensor::vector(vec![f])?, 0, &mut sums)?;
    let source = if rules.rules().iter().any(|r| r.is_lrp()) {
        HeatmapSource::Lrp { rules: rules.clone() }
    } else {
        HeatmapSource::DeepTaylor { rules: rules.clone() }
    };
    Ok(Heatmap {
        relevance: r.reshape(net.input_shape().to_vec())?,
        output: f,
        source,
        layer_sums: sums,
    })
}

/// Forward pass followed by [`deep_taylor`].
pub fn explain(net: &Network, x: &Tensor, rules: &RuleAssignment) -> Result<Heatmap> {
    let trace = net.forward(x)?;
    deep_taylor(net, &trace, rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DetectionLayer, PixelBounds, PoolingLayer};
    use crate::relevance::RelevanceRule;

    fn one_layer(bias: f64) -> Network {
        Network::from_blocks(
            vec![2],
            vec![(
                DetectionLayer::new(
                    Tensor::matrix(2, 2, vec![1.0, 0.5, 1.0, -0.5]).unwrap(),
                    Tensor::vector(vec![bias, -0.1]).unwrap(),
                    false,
                )
                .unwrap(),
                PoolingLayer::sum(2).unwrap(),
            )],
            Some(PixelBounds::uniform(2, -0.5, 1.5).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn dead_output_gives_empty_heatmap() {
        let net = one_layer(-10.0);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let h = explain(&net, &x, &RuleAssignment::training_free(&net)).unwrap();
        assert_eq!(h.output, 0.0);
        assert!(h.relevance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audit_trail_covers_every_boundary() {
        let net = one_layer(-0.5);
        let x = Tensor::vector(vec![1.0, 1.2]).unwrap();
        let h = explain(&net, &x, &RuleAssignment::training_free(&net)).unwrap();
        let layers: Vec<usize> = h.layer_sums.iter().map(|s| s.layer).collect();
        assert_eq!(layers, vec![2, 1, 0]);
        for s in &h.layer_sums {
            assert!((s.relevance - h.output).abs() < 1e-12);
        }
    }

    #[test]
    fn zplus_on_signed_pixels_is_rejected_with_layer_index() {
        let net = one_layer(-0.5);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let rules = RuleAssignment::parse("zplus", &net).unwrap();
        match explain(&net, &x, &rules) {
            Err(RelevanceError::Domain { layer: 0, rule, .. }) => assert_eq!(rule, "zplus"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            rules.validate(&net),
            Err(RelevanceError::Domain { layer: 0, .. })
        ));
        assert!(RuleAssignment::training_free(&net).validate(&net).is_ok());
    }

    #[test]
    fn positive_bias_needs_absorption() {
        let net = one_layer(0.3);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            explain(&net, &x, &RuleAssignment::parse("zbox", &net).unwrap()),
            Err(RelevanceError::PositiveBias { layer: 0, unit: 0, .. })
        ));
        assert!(matches!(
            RuleAssignment::parse("zbox", &net).unwrap().validate(&net),
            Err(RelevanceError::PositiveBias { layer: 0, unit: 0, .. })
        ));
        let h = explain(&net, &x, &RuleAssignment::parse("zbox+bias", &net).unwrap()).unwrap();
        let s = h.layer_sums.last().unwrap();
        assert!((s.relevance + s.bias - h.output).abs() < 1e-12);
        assert!(s.bias > 0.0);
    }

    #[test]
    fn parse_and_display() {
        let net = Network::preset(crate::network::Preset::MnistTwoLayer, 0.05, 0).unwrap();
        let a = RuleAssignment::parse(crate::relevance::DEFAULT_RULE_SPEC, &net).unwrap();
        assert_eq!(a, RuleAssignment::training_free(&net));
        let b = RuleAssignment::parse("zbox:first=-0.5:1.5,zplus:rest", &net).unwrap();
        assert_eq!(b.to_string(), "zbox:0=-0.5:1.5,zplus:1");
        assert_eq!(RuleAssignment::parse(&b.to_string(), &net).unwrap(), b);
        let c = RuleAssignment::parse("alphabeta=2:1,epsilon:last=3", &net).unwrap();
        assert_eq!(c.rules()[0], RelevanceRule::alpha_beta(2.0, 1.0).unwrap());
        assert_eq!(c.rules()[1], RelevanceRule::epsilon(3.0).unwrap());
        for bad in [
            "",
            "zbox:first",
            "foo",
            "alphabeta=2:2",
            "zbox=1:2",
            "w2:7",
            "zplus=1",
            "w2+bias",
            "epsilon=-1",
        ] {
            assert!(RuleAssignment::parse(bad, &net).is_err(), "{bad:?}");
        }
    }
}
