//! LRP rules for single layers and whole networks. Unlike the root-point
//! rules these accept signed relevance and make no consistency promise.

use crate::network::{DetectionLayer, Network};
use crate::relevance::rules_internal::{alphabeta, epsilon};
use crate::relevance::{explain, Heatmap, RelevanceRule, Result, RuleAssignment};
use crate::tensor::Tensor;

/// `R_i = Σ_j (α z⁺_ij / (Σ_i z⁺_ij + b⁺_j) − β z⁻_ij / (Σ_i z⁻_ij + b⁻_j)) R_j`
/// with `α − β = 1`; both divisions guarded.
pub fn lrp_alphabeta(layer: &DetectionLayer, x: &Tensor, r: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    RelevanceRule::alpha_beta(alpha, beta)?;
    Ok(alphabeta(layer, &x.flatten(), r, alpha, beta)?.input)
}

/// `R_i = Σ_j z_ij / s(Σ_i z_ij + b_j) · R_j`, `s(t) = t ± ε` away from 0.
pub fn lrp_epsilon(layer: &DetectionLayer, x: &Tensor, r: &Tensor, eps: f64) -> Result<Tensor> {
    RelevanceRule::epsilon(eps)?;
    Ok(epsilon(layer, &x.flatten(), r, eps)?.input)
}

/// Applies one LRP rule to every detection layer.
pub fn lrp_heatmap(net: &Network, x: &Tensor, rule: RelevanceRule) -> Result<Heatmap> {
    explain(net, x, &RuleAssignment::uniform(rule, net.num_blocks()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::propagate_zplus;
    use proptest::prelude::*;

    fn layer(w: Vec<f64>, d_in: usize, d_out: usize, b: Vec<f64>) -> DetectionLayer {
        DetectionLayer::new(
            Tensor::matrix(d_in, d_out, w).unwrap(),
            Tensor::vector(b).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn mixed_weights_give_negative_relevance() {
        let l = layer(vec![1.0, -1.0], 2, 1, vec![0.0]);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let r = lrp_alphabeta(&l, &x, &Tensor::vector(vec![1.0]).unwrap(), 2.0, 1.0).unwrap();
        assert!(r.data()[1] < 0.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let l = layer(vec![1.0, -1.0], 2, 1, vec![0.0]);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let r = Tensor::vector(vec![1.0]).unwrap();
        assert!(lrp_alphabeta(&l, &x, &r, 2.0, 0.5).is_err());
        assert!(lrp_epsilon(&l, &x, &r, 0.0).is_err());
    }

    #[test]
    fn epsilon_at_zero_preactivation_is_finite() {
        let l = layer(vec![1.0, -1.0], 2, 1, vec![0.0]);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let r = lrp_epsilon(&l, &x, &Tensor::vector(vec![1.0]).unwrap(), 0.25).unwrap();
        assert_eq!(r.data(), &[4.0, -4.0]);
    }

    fn random_layer(d_in: usize, d_out: usize) -> impl Strategy<Value = (DetectionLayer, Tensor, Tensor)> {
        (
            prop::collection::vec(-1.0..1.0f64, d_in * d_out),
            prop::collection::vec(-1.0..0.0f64, d_out),
            prop::collection::vec(0.0..2.0f64, d_in),
            prop::collection::vec(0.0..5.0f64, d_out),
        )
            .prop_map(move |(w, b, x, r)| {
                (
                    layer(w, d_in, d_out, b),
                    Tensor::vector(x).unwrap(),
                    Tensor::vector(r).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn alphabeta_one_zero_matches_zplus((l, x, r) in (1usize..8, 1usize..8).prop_flat_map(|(a, b)| random_layer(a, b))) {
            let ab = lrp_alphabeta(&l, &x, &r, 1.0, 0.0).unwrap();
            let zp = propagate_zplus(&l, &x, &r).unwrap();
            for (a, b) in ab.data().iter().zip(zp.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn large_epsilon_shrinks_relevance((l, x, r) in random_layer(5, 3)) {
            // |R_i| ≤ Σ_j |z_ij| R_j / ε ≤ 5 · 2 · 5 / ε.
            let large = lrp_epsilon(&l, &x, &r, 1e6).unwrap().max_abs();
            prop_assert!(large <= 5e-5);
        }
    }
}
