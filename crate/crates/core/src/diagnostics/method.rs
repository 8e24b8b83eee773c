//! Heatmapping methods behind one interface so diagnostics and the CLI can
//! treat them uniformly.

use std::fmt;
use std::str::FromStr;

use super::{DiagnosticsError, Result};
use crate::baselines::{
    lrp_heatmap, nearest_root_taylor, sensitivity_heatmap, RootSearchConfig, SensitivityMode, DEFAULT_SENSITIVITY_STEP,
};
use crate::network::Network;
use crate::relevance::{self, minmax_heatmap, Heatmap, MinMaxModel, RelevanceRule, RuleAssignment, DEFAULT_RULE_SPEC};
use crate::tensor::Tensor;

/// Produces a heatmap for one input.
pub trait Heatmapper: Sync {
    fn label(&self) -> String;
    fn heatmap(&self, x: &Tensor) -> relevance::Result<Heatmap>;
}

/// A heatmapping method as named on the command line.
///
/// | name | method |
/// |------|--------|
/// | `deep-taylor[=SPEC]` | deep Taylor with a rule assignment |
/// | `minmax[=RULE]` | min-max model of the lowest block, decomposed with `RULE` |
/// | `sensitivity` | squared gradient rescaled to `f(x)` |
/// | `sensitivity-raw[=STEP]` | `STEP · (∂f/∂x)²` |
/// | `nearest-root[=RATIO]` | Taylor expansion at a root with `f < RATIO · f(x)` |
/// | `lrp-alphabeta=A:B` | αβ rule on every layer |
/// | `lrp-epsilon=E` | ε rule on every layer |
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    DeepTaylor { rules: String },
    MinMax { rule: String },
    Sensitivity(SensitivityMode),
    NearestRoot(RootSearchConfig),
    LrpAlphaBeta { alpha: f64, beta: f64 },
    LrpEpsilon { epsilon: f64 },
}

fn number(spec: &str, text: &str) -> Result<f64> {
    text.trim().parse().map_err(|_| DiagnosticsError::Method {
        spec: spec.into(),
        reason: format!("{text:?} is not a number"),
    })
}

impl FromStr for Method {
    type Err = DiagnosticsError;

    fn from_str(spec: &str) -> Result<Self> {
        let (name, arg) = match spec.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let bad = |reason: &str| DiagnosticsError::Method {
            spec: spec.into(),
            reason: reason.into(),
        };
        let method = match (name, arg) {
            ("deep-taylor", a) => Self::DeepTaylor {
                rules: a.unwrap_or(DEFAULT_RULE_SPEC).into(),
            },
            ("minmax", a) => Self::MinMax {
                rule: a.unwrap_or("zbox").into(),
            },
            ("sensitivity", None) => Self::Sensitivity(SensitivityMode::Rescaled),
            ("sensitivity-raw", a) => Self::Sensitivity(SensitivityMode::Raw {
                step: match a {
                    Some(t) => number(spec, t)?,
                    None => DEFAULT_SENSITIVITY_STEP,
                },
            }),
            ("nearest-root", a) => {
                let mut cfg = RootSearchConfig::default();
                if let Some(t) = a {
                    cfg.stop_ratio = number(spec, t)?;
                }
                cfg.validate().map_err(|e| bad(&e.to_string()))?;
                Self::NearestRoot(cfg)
            }
            ("lrp-alphabeta", Some(a)) => {
                let (al, be) = a.split_once(':').ok_or_else(|| bad("expected A:B"))?;
                let (alpha, beta) = (number(spec, al)?, number(spec, be)?);
                RelevanceRule::alpha_beta(alpha, beta).map_err(|e| bad(&e.to_string()))?;
                Self::LrpAlphaBeta { alpha, beta }
            }
            ("lrp-epsilon", Some(a)) => {
                let epsilon = number(spec, a)?;
                RelevanceRule::epsilon(epsilon).map_err(|e| bad(&e.to_string()))?;
                Self::LrpEpsilon { epsilon }
            }
            ("sensitivity", Some(_)) => return Err(bad("takes no parameter")),
            ("lrp-alphabeta" | "lrp-epsilon", None) => return Err(bad("needs a parameter")),
            _ => return Err(bad("unknown method")),
        };
        if let Self::Sensitivity(SensitivityMode::Raw { step }) = method {
            if !(step > 0.0 && step.is_finite()) {
                return Err(bad("step must be positive"));
            }
        }
        Ok(method)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DeepTaylor { rules } => write!(f, "deep-taylor={rules}"),
            Self::MinMax { rule } => write!(f, "minmax={rule}"),
            Self::Sensitivity(SensitivityMode::Rescaled) => write!(f, "sensitivity"),
            Self::Sensitivity(SensitivityMode::Raw { step }) => write!(f, "sensitivity-raw={step}"),
            Self::NearestRoot(cfg) => write!(f, "nearest-root={}", cfg.stop_ratio),
            Self::LrpAlphaBeta { alpha, beta } => write!(f, "lrp-alphabeta={alpha}:{beta}"),
            Self::LrpEpsilon { epsilon } => write!(f, "lrp-epsilon={epsilon}"),
        }
    }
}

impl Method {
    /// Resolves the method against a network. Rule specs are parsed here so
    /// that mismatches surface before any sample is processed.
    pub fn bind<'a>(&self, net: &'a Network, minmax: Option<&'a MinMaxModel>) -> Result<Bound<'a>> {
        let kind = match self {
            Self::DeepTaylor { rules } => {
                let rules = RuleAssignment::parse(rules, net)?;
                rules.validate(net)?;
                BoundKind::Rules(rules)
            }
            Self::MinMax { rule } => {
                let model = minmax.ok_or(DiagnosticsError::MissingMinMax)?;
                let mut spec = DEFAULT_RULE_SPEC.to_string();
                spec.push(',');
                spec.push_str(&format!("{rule}:{}", model.block()));
                let rules = RuleAssignment::parse(&spec, net)?;
                rules.validate(net)?;
                BoundKind::MinMax(model, rules.rules()[model.block()].clone())
            }
            Self::Sensitivity(mode) => BoundKind::Sensitivity(*mode),
            Self::NearestRoot(cfg) => BoundKind::NearestRoot(cfg.clone()),
            Self::LrpAlphaBeta { alpha, beta } => BoundKind::Lrp(RelevanceRule::alpha_beta(*alpha, *beta)?),
            Self::LrpEpsilon { epsilon } => BoundKind::Lrp(RelevanceRule::epsilon(*epsilon)?),
        };
        Ok(Bound {
            net,
            label: self.to_string(),
            kind,
        })
    }
}

#[derive(Clone, Debug)]
enum BoundKind<'a> {
    Rules(RuleAssignment),
    MinMax(&'a MinMaxModel, RelevanceRule),
    Sensitivity(SensitivityMode),
    NearestRoot(RootSearchConfig),
    Lrp(RelevanceRule),
}

/// A [`Method`] attached to a network.
#[derive(Clone, Debug)]
pub struct Bound<'a> {
    net: &'a Network,
    label: String,
    kind: BoundKind<'a>,
}

impl Heatmapper for Bound<'_> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn heatmap(&self, x: &Tensor) -> relevance::Result<Heatmap> {
        match &self.kind {
            BoundKind::Rules(rules) => relevance::explain(self.net, x, rules),
            BoundKind::MinMax(model, rule) => minmax_heatmap(self.net, model, &self.net.forward(x)?, rule),
            BoundKind::Sensitivity(mode) => sensitivity_heatmap(self.net, x, *mode),
            BoundKind::NearestRoot(cfg) => nearest_root_taylor(self.net, x, cfg),
            BoundKind::Lrp(rule) => lrp_heatmap(self.net, x, rule.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::RelevanceError;

    #[test]
    fn names_round_trip() {
        for spec in [
            "deep-taylor=zbox:first,zplus:rest",
            "minmax=zbox",
            "sensitivity",
            "sensitivity-raw=0.001",
            "nearest-root=0.1",
            "lrp-alphabeta=2:1",
            "lrp-epsilon=10",
        ] {
            let m: Method = spec.parse().unwrap();
            assert_eq!(m.to_string(), spec);
        }
        assert_eq!(
            "deep-taylor".parse::<Method>().unwrap(),
            Method::DeepTaylor {
                rules: DEFAULT_RULE_SPEC.into()
            }
        );
    }

    #[test]
    fn bad_names_are_rejected() {
        for spec in [
            "",
            "taylor",
            "sensitivity=1",
            "sensitivity-raw=-1",
            "lrp-alphabeta=1:1",
            "lrp-alphabeta=2",
            "lrp-epsilon",
            "lrp-epsilon=0",
            "nearest-root=1.5",
        ] {
            assert!(spec.parse::<Method>().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn binding_checks_rules_and_models() {
        let net = Network::preset(crate::network::Preset::MnistTwoLayer, 0.05, 0).unwrap();
        let m: Method = "deep-taylor=w2,zplus:rest".parse().unwrap();
        assert!(m.bind(&net, None).is_ok());
        let m: Method = "deep-taylor=zplus".parse().unwrap();
        assert!(matches!(
            m.bind(&net, None),
            Err(DiagnosticsError::Relevance(RelevanceError::Domain { layer: 0, .. }))
        ));
        let m: Method = "deep-taylor=zbox:rest".parse().unwrap();
        assert!(m.bind(&net, None).is_err());
        let m: Method = "minmax".parse().unwrap();
        assert!(matches!(m.bind(&net, None), Err(DiagnosticsError::MissingMinMax)));
    }
}
