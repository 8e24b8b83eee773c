//! Per-layer redistribution rules, written as dense matrix algorithms.
//!
//! Vectors are handled as `[d, 1]` columns so every step is a product,
//! an element-wise op, or a guarded division.

use super::{RelevanceError, RelevanceRule, Result, RuleKind};
use crate::network::{DetectionLayer, PixelBounds, PoolingLayer};
use crate::tensor::{matmul, matmul_transpose_lhs, reduce, Reduction, Tensor};

/// Slack when checking that inputs lie in a rule's domain.
const DOMAIN_SLACK: f64 = 1e-9;

/// Output of one detection-layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    /// Relevance of the layer inputs, `[d_in]`.
    pub input: Tensor,
    /// Relevance absorbed by each unit's bias, `[d_out]`.
    pub bias: Tensor,
}

fn column(t: &Tensor) -> Tensor {
    t.flatten().as_column()
}

fn check_lengths(layer: &DetectionLayer, x: Option<&Tensor>, r: &Tensor) -> Result<()> {
    let bad = |what: &str, got: usize, want: usize| {
        Err(RelevanceError::Domain {
            layer: 0,
            rule: "any".into(),
            reason: format!("{what} has {got} entries, layer expects {want}"),
        })
    };
    if r.len() != layer.output_dim() {
        return bad("relevance", r.len(), layer.output_dim());
    }
    if let Some(x) = x {
        if x.len() != layer.input_dim() {
            return bad("input", x.len(), layer.input_dim());
        }
    }
    Ok(())
}

/// `R_j = x_j / Σ_{j'∈g} x_{j'} · R_g` within each pooling group. Groups
/// whose activations sum to zero pass on nothing.
pub fn redistribute_pool(pool: &PoolingLayer, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    if let Some((unit, &value)) = x.data().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(RelevanceError::NegativeActivation { layer: 0, unit, value });
    }
    pool_redistribute(pool, x, r)
}

/// As [`redistribute_pool`] but without sign checks, for signed LRP flows.
pub(crate) fn pool_redistribute(pool: &PoolingLayer, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    let g = pool.group_size();
    let groups = x.len() / g;
    if x.len() % g != 0 || r.len() != groups {
        return Err(RelevanceError::Domain {
            layer: 0,
            rule: "pool".into(),
            reason: format!(
                "{} activations and {} relevances do not fit groups of {g}",
                x.len(),
                r.len()
            ),
        });
    }
    let grouped = x.reshape(vec![groups, g])?;
    let totals = reduce(&grouped, Reduction::Sum, 1)?.reshape(vec![groups, 1])?;
    let share = r.reshape(vec![groups, 1])?.guarded_div(&totals)?;
    let out = grouped.mul(&matmul(&share, &Tensor::full(vec![1, g], 1.0)?)?)?;
    Ok(out.reshape(vec![x.len()])?)
}

/// w²-rule: `N = V ⊘ colsums(V)` with `V = W ⊙ W`, then `R_i = N·R_j`.
/// `N` depends on the weights only and is cached on the layer.
pub fn propagate_w2(layer: &DetectionLayer, r: &Tensor) -> Result<Tensor> {
    check_lengths(layer, None, r)?;
    Ok(matmul(layer.squared_weight_shares(), &column(r))?.flatten())
}

/// z-rule: `Z = Wᵀ X`, `R_i = X ⊙ (W · (R ⊘ Z))`.
pub fn propagate_z(layer: &DetectionLayer, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    check_lengths(layer, Some(x), r)?;
    let x = column(x);
    let w = layer.weights();
    let z = matmul_transpose_lhs(w, &x)?;
    let s = column(r).guarded_div(&z)?;
    Ok(x.mul(&matmul(w, &s)?)?.flatten())
}

/// z⁺-rule: `V = W⁺`, `Z = Vᵀ X`, `R_i = X ⊙ (V · (R ⊘ Z))`. Inputs must
/// be nonnegative.
pub fn propagate_zplus(layer: &DetectionLayer, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(zplus(layer, x, r, false)?.input)
}

fn zplus(layer: &DetectionLayer, x: &Tensor, r: &Tensor, absorb: bool) -> Result<Propagated> {
    check_lengths(layer, Some(x), r)?;
    if let Some((i, &v)) = x.data().iter().enumerate().find(|(_, &v)| v < -DOMAIN_SLACK) {
        return Err(RelevanceError::Domain {
            layer: 0,
            rule: "zplus".into(),
            reason: format!("input {i} is {v}, the rule needs nonnegative inputs"),
        });
    }
    let x = column(x);
    let v = layer.positive_weights();
    let mut z = matmul_transpose_lhs(v, &x)?;
    let bplus = column(&layer.biases().positive_part());
    if absorb {
        z = z.add(&bplus)?;
    }
    let n = column(r).guarded_div(&z)?;
    Ok(Propagated {
        input: x.mul(&matmul(v, &n)?)?.flatten(),
        bias: bias_share(&bplus, &n, absorb)?,
    })
}

fn bias_share(bplus: &Tensor, n: &Tensor, absorb: bool) -> Result<Tensor> {
    let share = if absorb {
        bplus.mul(n)?
    } else {
        Tensor::zeros(bplus.shape().to_vec())?
    };
    Ok(share.flatten())
}

/// z^B-rule for inputs in the box `[l, h]` with `U = W⁻`, `V = W⁺`:
/// `N = R ⊘ (WᵀX − VᵀL − UᵀH)`,
/// `R_i = X ⊙ (W·N) − L ⊙ (V·N) − H ⊙ (U·N)`.
pub fn propagate_zbox(layer: &DetectionLayer, x: &Tensor, r: &Tensor, low: &Tensor, high: &Tensor) -> Result<Tensor> {
    Ok(zbox(layer, x, r, low, high, false)?.input)
}

fn zbox(
    layer: &DetectionLayer,
    x: &Tensor,
    r: &Tensor,
    low: &Tensor,
    high: &Tensor,
    absorb: bool,
) -> Result<Propagated> {
    check_lengths(layer, Some(x), r)?;
    if low.len() != x.len() || high.len() != x.len() {
        return Err(RelevanceError::Domain {
            layer: 0,
            rule: "zbox".into(),
            reason: format!("bounds cover {} inputs, layer has {}", low.len(), x.len()),
        });
    }
    let (xd, ld, hd) = (x.data(), low.data(), high.data());
    for i in 0..xd.len() {
        if ld[i] > 0.0 || hd[i] < 0.0 {
            return Err(RelevanceError::Domain {
                layer: 0,
                rule: "zbox".into(),
                reason: format!("bounds [{}, {}] of input {i} do not contain 0", ld[i], hd[i]),
            });
        }
        if xd[i] < ld[i] - DOMAIN_SLACK || xd[i] > hd[i] + DOMAIN_SLACK {
            return Err(RelevanceError::Domain {
                layer: 0,
                rule: "zbox".into(),
                reason: format!("input {i} is {} outside the box [{}, {}]", xd[i], ld[i], hd[i]),
            });
        }
    }
    let (x, l, h) = (column(x), column(low), column(high));
    let w = layer.weights();
    let (v, u) = (layer.positive_weights(), layer.negative_weights());
    let mut z = matmul_transpose_lhs(w, &x)?
        .sub(&matmul_transpose_lhs(v, &l)?)?
        .sub(&matmul_transpose_lhs(u, &h)?)?;
    let bplus = column(&layer.biases().positive_part());
    if absorb {
        z = z.add(&bplus)?;
    }
    let n = column(r).guarded_div(&z)?;
    let input = x
        .mul(&matmul(w, &n)?)?
        .sub(&l.mul(&matmul(v, &n)?)?)?
        .sub(&h.mul(&matmul(u, &n)?)?)?;
    Ok(Propagated {
        input: input.flatten(),
        bias: bias_share(&bplus, &n, absorb)?,
    })
}

/// LRP-αβ over the element-wise parts of `z_ij = x_i w_ij`. With
/// `z⁺_ij = x⁺w⁺ + x⁻w⁻` and `z⁻_ij = x⁺w⁻ + x⁻w⁺` every term is a
/// product of a clamped input and a clamped weight matrix.
pub(crate) fn alphabeta(layer: &DetectionLayer, x: &Tensor, r: &Tensor, alpha: f64, beta: f64) -> Result<Propagated> {
    check_lengths(layer, Some(x), r)?;
    let x = column(x);
    let (xp, xn) = (x.positive_part(), x.negative_part());
    let (wp, wn) = (layer.positive_weights(), layer.negative_weights());
    let b = column(layer.biases());
    let (bp, bn) = (b.positive_part(), b.negative_part());

    let zp = matmul_transpose_lhs(wp, &xp)?.add(&matmul_transpose_lhs(wn, &xn)?)?;
    let zn = matmul_transpose_lhs(wn, &xp)?.add(&matmul_transpose_lhs(wp, &xn)?)?;
    let r = column(r);
    let np = r.guarded_div(&zp.add(&bp)?)?.scale(alpha);
    let nn = r.guarded_div(&zn.add(&bn)?)?.scale(beta);

    let pos = xp.mul(&matmul(wp, &np)?)?.add(&xn.mul(&matmul(wn, &np)?)?)?;
    let neg = xp.mul(&matmul(wn, &nn)?)?.add(&xn.mul(&matmul(wp, &nn)?)?)?;
    Ok(Propagated {
        input: pos.sub(&neg)?.flatten(),
        bias: bp.mul(&np)?.sub(&bn.mul(&nn)?)?.flatten(),
    })
}

/// LRP-ε: `R_i = X ⊙ (W · (R ⊘ s(WᵀX + b)))` with
/// `s(t) = t + ε (1_{t≥0} − 1_{t<0})`.
pub(crate) fn epsilon(layer: &DetectionLayer, x: &Tensor, r: &Tensor, eps: f64) -> Result<Propagated> {
    check_lengths(layer, Some(x), r)?;
    let x = column(x);
    let w = layer.weights();
    let b = column(layer.biases());
    let z = matmul_transpose_lhs(w, &x)?.add(&b)?;
    let s = z.map(|t| if t >= 0.0 { t + eps } else { t - eps });
    let n = column(r).guarded_div(&s)?;
    Ok(Propagated {
        input: x.mul(&matmul(w, &n)?)?.flatten(),
        bias: b.mul(&n)?.flatten(),
    })
}

/// Applies `rule` to one detection layer. `fallback_bounds` stands in for a
/// z^B rule without its own bounds. Root-point rules refuse positive biases
/// unless bias absorption is on.
pub fn propagate(
    rule: &RelevanceRule,
    layer: &DetectionLayer,
    x: &Tensor,
    r: &Tensor,
    fallback_bounds: Option<&PixelBounds>,
) -> Result<Propagated> {
    if rule.is_deep_taylor() && !rule.absorbs_positive_bias() {
        if let Some((unit, &value)) = layer.biases().data().iter().enumerate().find(|(_, &b)| b > 0.0) {
            return Err(RelevanceError::PositiveBias { layer: 0, unit, value });
        }
    }
    let absorb = rule.absorbs_positive_bias();
    let zero_bias = || Tensor::zeros(vec![layer.output_dim()]);
    match rule.kind() {
        RuleKind::W2 => Ok(Propagated {
            input: propagate_w2(layer, r)?,
            bias: zero_bias()?,
        }),
        RuleKind::Z => Ok(Propagated {
            input: propagate_z(layer, x, r)?,
            bias: zero_bias()?,
        }),
        RuleKind::ZPlus => zplus(layer, x, r, absorb),
        RuleKind::ZBox { bounds } => {
            let b = bounds
                .as_ref()
                .or(fallback_bounds)
                .ok_or_else(|| RelevanceError::Domain {
                    layer: 0,
                    rule: "zbox".into(),
                    reason: "no box bounds given and none known for this layer".into(),
                })?;
            zbox(layer, x, r, b.low(), b.high(), absorb)
        }
        RuleKind::AlphaBeta { alpha, beta } => alphabeta(layer, x, r, *alpha, *beta),
        RuleKind::Epsilon { epsilon: eps } => epsilon(layer, x, r, *eps),
    }
}

/// The direction `v` along which a root-point rule searches for the root of
/// unit `j`: `w_j` (w²), `x` (z), `x ⊙ 1[w_j ≥ 0]` (z⁺) and
/// `x − l ⊙ 1[w_j > 0] − h ⊙ 1[w_j < 0]` (z^B).
pub fn search_direction(
    rule: &RelevanceRule,
    x: &[f64],
    w_col: &[f64],
    bounds: Option<&PixelBounds>,
) -> Result<Vec<f64>> {
    match rule.kind() {
        RuleKind::W2 => Ok(w_col.to_vec()),
        RuleKind::Z => Ok(x.to_vec()),
        RuleKind::ZPlus => Ok(x
            .iter()
            .zip(w_col)
            .map(|(&xi, &w)| if w >= 0.0 { xi } else { 0.0 })
            .collect()),
        RuleKind::ZBox { bounds: own } => {
            let b = own.as_ref().or(bounds).ok_or_else(|| RelevanceError::Domain {
                layer: 0,
                rule: "zbox".into(),
                reason: "no box bounds".into(),
            })?;
            let (l, h) = (b.low().data(), b.high().data());
            Ok((0..x.len())
                .map(|i| {
                    let w = w_col[i];
                    x[i] - if w > 0.0 { l[i] } else { 0.0 } - if w < 0.0 { h[i] } else { 0.0 }
                })
                .collect())
        }
        RuleKind::AlphaBeta { .. } | RuleKind::Epsilon { .. } => Err(RelevanceError::InvalidRule(format!(
            "{} is not a root-point rule",
            rule.name()
        ))),
    }
}

/// Root `x̃ = x + t v` of unit `j` on the rule's search line, with
/// `t = −(Σ_i x_i w_ij + b_j) / Σ_i v_i w_ij`. `None` when the line runs
/// parallel to the unit's hyperplane.
pub fn implied_root(
    rule: &RelevanceRule,
    layer: &DetectionLayer,
    x: &Tensor,
    j: usize,
    bounds: Option<&PixelBounds>,
) -> Result<Option<Tensor>> {
    let (d_in, d_out) = layer.weights().dims2()?;
    let w = layer.weights().data();
    let w_col: Vec<f64> = (0..d_in).map(|i| w[i * d_out + j]).collect();
    let xd = x.data();
    let v = search_direction(rule, xd, &w_col, bounds)?;
    let vw: f64 = v.iter().zip(&w_col).map(|(a, b)| a * b).sum();
    if vw.abs() < crate::tensor::DIV_GUARD_TOLERANCE {
        return Ok(None);
    }
    let pre: f64 = xd.iter().zip(&w_col).map(|(a, b)| a * b).sum::<f64>() + layer.biases().data()[j];
    let t = -pre / vw;
    let root = xd.iter().zip(&v).map(|(&xi, &vi)| xi + t * vi).collect();
    Ok(Some(Tensor::new(x.shape().to_vec(), root)?))
}
