//! Deep Taylor decomposition: relevance redistribution through pooling and
//! detection layers, the min-max relevance model and the heatmap record
//! shared by every explanation method in the crate.

mod engine;
mod minmax;
mod rules;

pub(crate) mod rules_internal {
    pub(crate) use super::rules::{alphabeta, epsilon};
}

use std::fmt;

use thiserror::Error;

use crate::network::{Layer, Network, NetworkError, PixelBounds};
use crate::tensor::{Tensor, TensorError};

pub use engine::{backward, deep_taylor, explain, negative_tolerance};
pub use minmax::{
    minmax_decompose, minmax_heatmap, minmax_samples, train_minmax, MinMaxInit, MinMaxModel, MinMaxReport,
    MinMaxSample, DEFAULT_MINMAX_LEARNING_RATE,
};
pub use rules::{
    implied_root, propagate, propagate_w2, propagate_z, propagate_zbox, propagate_zplus, redistribute_pool,
    search_direction, Propagated,
};

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("cannot parse rule spec {spec:?}: {reason}")]
    Parse { spec: String, reason: String },
    #[error("rule assignment has {found} rules but the network has {expected} detection layers")]
    RuleCount { expected: usize, found: usize },
    #[error("layer {layer}: {rule} rule cannot be applied: {reason}")]
    Domain { layer: usize, rule: String, reason: String },
    #[error("layer {layer}: unit {unit} has positive bias {value}; enable bias absorption or use an LRP rule")]
    PositiveBias { layer: usize, unit: usize, value: f64 },
    #[error("layer {layer}: incoming relevance {value} at unit {unit} is negative")]
    NegativeRelevance { layer: usize, unit: usize, value: f64 },
    #[error("layer {layer}: activation {value} at unit {unit} is negative")]
    NegativeActivation { layer: usize, unit: usize, value: f64 },
    #[error("no training samples")]
    EmptyData,
    #[error("min-max training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

/// How relevance flowing into a detection layer is split among its inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum RuleKind {
    /// Proportional to squared weights; any input domain.
    W2,
    /// Proportional to `x_i w_ij`; no positivity guarantee.
    Z,
    /// Proportional to `x_i w_ij⁺`; nonnegative inputs.
    ZPlus,
    /// Box-constrained inputs `l ≤ x ≤ h`. `None` takes the network's pixel
    /// bounds, which only exist for the first layer.
    ZBox { bounds: Option<PixelBounds> },
    /// LRP with separate positive and negative shares, `alpha - beta = 1`.
    AlphaBeta { alpha: f64, beta: f64 },
    /// LRP with a stabilized denominator.
    Epsilon { epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceRule {
    kind: RuleKind,
    absorb_positive_bias: bool,
}

impl RelevanceRule {
    pub fn new(kind: RuleKind, absorb_positive_bias: bool) -> Result<Self> {
        match &kind {
            RuleKind::ZBox { bounds: Some(b) } => {
                if let Some(i) = (0..b.len()).find(|&i| b.low().data()[i] > 0.0 || b.high().data()[i] < 0.0) {
                    return Err(RelevanceError::InvalidRule(format!(
                        "zbox bounds must satisfy l <= 0 <= h, input {i} has [{}, {}]",
                        b.low().data()[i],
                        b.high().data()[i]
                    )));
                }
            }
            RuleKind::AlphaBeta { alpha, beta } => {
                if alpha - beta != 1.0 || *beta < 0.0 {
                    return Err(RelevanceError::InvalidRule(format!(
                        "alphabeta needs alpha - beta = 1 and beta >= 0, got alpha={alpha}, beta={beta}"
                    )));
                }
            }
            RuleKind::Epsilon { epsilon } => {
                if !(*epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(RelevanceError::InvalidRule(format!(
                        "epsilon must be positive, got {epsilon}"
                    )));
                }
            }
            _ => {}
        }
        if absorb_positive_bias && !matches!(kind, RuleKind::ZPlus | RuleKind::ZBox { .. }) {
            return Err(RelevanceError::InvalidRule(
                "bias absorption is only defined for the zplus and zbox rules".into(),
            ));
        }
        Ok(Self {
            kind,
            absorb_positive_bias,
        })
    }

    pub fn w2() -> Self {
        Self::plain(RuleKind::W2)
    }

    pub fn z() -> Self {
        Self::plain(RuleKind::Z)
    }

    pub fn zplus() -> Self {
        Self::plain(RuleKind::ZPlus)
    }

    /// z^B with the network's pixel bounds.
    pub fn zbox() -> Self {
        Self::plain(RuleKind::ZBox { bounds: None })
    }

    pub fn zbox_with(bounds: PixelBounds) -> Result<Self> {
        Self::new(RuleKind::ZBox { bounds: Some(bounds) }, false)
    }

    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(RuleKind::AlphaBeta { alpha, beta }, false)
    }

    pub fn epsilon(epsilon: f64) -> Result<Self> {
        Self::new(RuleKind::Epsilon { epsilon }, false)
    }

    fn plain(kind: RuleKind) -> Self {
        Self {
            kind,
            absorb_positive_bias: false,
        }
    }

    /// Same rule with bias absorption toggled.
    pub fn absorbing(self, on: bool) -> Result<Self> {
        Self::new(self.kind, on)
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn absorbs_positive_bias(&self) -> bool {
        self.absorb_positive_bias
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            RuleKind::W2 => "w2",
            RuleKind::Z => "z",
            RuleKind::ZPlus => "zplus",
            RuleKind::ZBox { .. } => "zbox",
            RuleKind::AlphaBeta { .. } => "alphabeta",
            RuleKind::Epsilon { .. } => "epsilon",
        }
    }

    /// The four root-point rules, as opposed to the LRP heuristics.
    pub fn is_deep_taylor(&self) -> bool {
        !self.is_lrp()
    }

    pub fn is_lrp(&self) -> bool {
        matches!(self.kind, RuleKind::AlphaBeta { .. } | RuleKind::Epsilon { .. })
    }

    /// Conservative and positive on its input domain.
    pub fn consistency_guaranteed(&self) -> bool {
        matches!(self.kind, RuleKind::W2 | RuleKind::ZPlus | RuleKind::ZBox { .. })
    }
}

impl fmt::Display for RelevanceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        if self.absorb_positive_bias {
            f.write_str("+bias")?;
        }
        match &self.kind {
            RuleKind::ZBox { bounds: Some(b) } => {
                let (lo, hi) = (b.low().data(), b.high().data());
                if lo.iter().all(|&v| v == lo[0]) && hi.iter().all(|&v| v == hi[0]) {
                    write!(f, "={}:{}", lo[0], hi[0])
                } else {
                    f.write_str("=custom")
                }
            }
            RuleKind::AlphaBeta { alpha, beta } => write!(f, "={alpha}:{beta}"),
            RuleKind::Epsilon { epsilon } => write!(f, "={epsilon}"),
            _ => Ok(()),
        }
    }
}

/// One rule per detection layer, bottom first.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleAssignment {
    rules: Vec<RelevanceRule>,
}

/// Default spec: z^B on the pixel layer, z⁺ everywhere above.
pub const DEFAULT_RULE_SPEC: &str = "zbox:first,zplus:rest";

impl RuleAssignment {
    pub fn new(rules: Vec<RelevanceRule>) -> Self {
        Self { rules }
    }

    pub fn uniform(rule: RelevanceRule, layers: usize) -> Self {
        Self {
            rules: vec![rule; layers],
        }
    }

    /// z^B on the first layer (w² if the network has no pixel bounds) and
    /// z⁺ on every layer above.
    pub fn training_free(net: &Network) -> Self {
        let first = if net.bounds().is_some() {
            RelevanceRule::zbox()
        } else {
            RelevanceRule::w2()
        };
        let mut rules = vec![RelevanceRule::zplus(); net.num_blocks()];
        rules[0] = first;
        Self { rules }
    }

    pub fn rules(&self) -> &[RelevanceRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn check_len(&self, net: &Network) -> Result<()> {
        if self.rules.len() != net.num_blocks() {
            return Err(RelevanceError::RuleCount {
                expected: net.num_blocks(),
                found: self.rules.len(),
            });
        }
        Ok(())
    }

    /// Parses comma-separated `rule[+bias][:target][=params]` tokens against
    /// a network. `target` is `first`, `rest`, `last`, `all` (the default) or
    /// a detection-layer index; later tokens override earlier ones. Params
    /// are `l:h` for zbox (uniform bounds), `alpha:beta` for alphabeta and
    /// `epsilon` for epsilon.
    pub fn parse(spec: &str, net: &Network) -> Result<Self> {
        let err = |reason: String| RelevanceError::Parse {
            spec: spec.to_string(),
            reason,
        };
        let n = net.num_blocks();
        let widths: Vec<usize> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Detection(d) => Some(d.input_dim()),
                Layer::Pooling(_) => None,
            })
            .collect();
        let mut slots: Vec<Option<RelevanceRule>> = vec![None; n];
        for token in spec.split(',').map(str::trim) {
            if token.is_empty() {
                return Err(err("empty token".into()));
            }
            let (head, params) = match token.split_once('=') {
                Some((h, p)) => (h, Some(p)),
                None => (token, None),
            };
            let (rule_part, target) = match head.split_once(':') {
                Some((r, t)) => (r, t),
                None => (head, "all"),
            };
            let (name, absorb) = match rule_part.strip_suffix("+bias") {
                Some(r) => (r, true),
                None => (rule_part, false),
            };
            let layers: Vec<usize> = match target {
                "all" => (0..n).collect(),
                "first" => vec![0],
                "rest" => (1..n).collect(),
                "last" => vec![n - 1],
                t => match t.parse::<usize>() {
                    Ok(i) if i < n => vec![i],
                    _ => {
                        return Err(err(format!(
                            "target {t:?} is not first, rest, last, all or a layer index below {n}"
                        )))
                    }
                },
            };
            let numbers = |expected: usize| -> Result<Vec<f64>> {
                let p = params.ok_or_else(|| err(format!("{name} needs {expected} parameter(s)")))?;
                let v = p
                    .split(':')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("bad parameter list {p:?}: {e}")))?;
                if v.len() != expected {
                    return Err(err(format!("{name} needs {expected} parameter(s), got {}", v.len())));
                }
                Ok(v)
            };
            for &layer in &layers {
                let kind = match name {
                    "w2" => RuleKind::W2,
                    "z" => RuleKind::Z,
                    "zplus" => RuleKind::ZPlus,
                    "zbox" => match params {
                        None => RuleKind::ZBox { bounds: None },
                        Some(_) => {
                            let v = numbers(2)?;
                            RuleKind::ZBox {
                                bounds: Some(PixelBounds::uniform(widths[layer], v[0], v[1])?),
                            }
                        }
                    },
                    "alphabeta" => {
                        let v = numbers(2)?;
                        RuleKind::AlphaBeta {
                            alpha: v[0],
                            beta: v[1],
                        }
                    }
                    "epsilon" => RuleKind::Epsilon {
                        epsilon: numbers(1)?[0],
                    },
                    other => {
                        return Err(err(format!(
                            "unknown rule {other:?} (expected w2, z, zplus, zbox, alphabeta or epsilon)"
                        )))
                    }
                };
                if params.is_some() && matches!(kind, RuleKind::W2 | RuleKind::Z | RuleKind::ZPlus) {
                    return Err(err(format!("{name} takes no parameters")));
                }
                slots[layer] = Some(RelevanceRule::new(kind, absorb)?);
            }
        }
        let rules = slots
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| err(format!("detection layer {i} has no rule"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rules })
    }
}

impl fmt::Display for RuleAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.rules.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            let s = r.to_string();
            match s.split_once('=') {
                Some((head, params)) => write!(f, "{head}:{i}={params}")?,
                None => write!(f, "{s}:{i}")?,
            }
        }
        Ok(())
    }
}

/// Relevance total at one layer boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSum {
    /// Index of the layer whose input carries this relevance; the number of
    /// layers denotes the network output.
    pub layer: usize,
    pub relevance: f64,
    /// Relevance taken up by bias units of this layer (bias absorption or
    /// LRP bias terms).
    pub bias: f64,
}

/// Which method produced a heatmap, with method-specific results.
#[derive(Clone, Debug, PartialEq)]
pub enum HeatmapSource {
    DeepTaylor {
        rules: RuleAssignment,
    },
    Lrp {
        rules: RuleAssignment,
    },
    MinMax {
        rule: RelevanceRule,
        estimate: f64,
    },
    Sensitivity {
        raw: bool,
        scale: f64,
    },
    NearestRoot {
        root_output: f64,
        iterations: usize,
        converged: bool,
    },
}

impl HeatmapSource {
    pub fn label(&self) -> String {
        match self {
            Self::DeepTaylor { rules } => format!("deep-taylor[{rules}]"),
            Self::Lrp { rules } => format!("lrp[{rules}]"),
            Self::MinMax { rule, .. } => format!("minmax[{rule}]"),
            Self::Sensitivity { raw: true, .. } => "sensitivity-raw".into(),
            Self::Sensitivity { raw: false, .. } => "sensitivity".into(),
            Self::NearestRoot { .. } => "nearest-root".into(),
        }
    }

    /// Whether the method is conservative and positive by construction.
    pub fn consistency_guaranteed(&self) -> bool {
        match self {
            Self::DeepTaylor { rules } => rules.rules().iter().all(RelevanceRule::consistency_guaranteed),
            _ => false,
        }
    }
}

/// Pixel-wise relevances for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Shaped like the network input.
    pub relevance: Tensor,
    /// `f(x)`, the relevance handed to the top layer.
    pub output: f64,
    pub source: HeatmapSource,
    /// Known boundary totals, output first.
    pub layer_sums: Vec<LayerSum>,
}

impl Heatmap {
    pub fn total(&self) -> f64 {
        self.relevance.sum()
    }

    /// `|Σ_p R_p − f(x)|`.
    pub fn conservation_gap(&self) -> f64 {
        (self.total() - self.output).abs()
    }

    pub fn min(&self) -> f64 {
        self.relevance.min()
    }
}
