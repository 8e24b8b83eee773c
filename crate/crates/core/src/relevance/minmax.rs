//! Min-max relevance model: a trainable stand-in for the relevance of the
//! pooled units of one block, given the block's input and the relevance of
//! the detection units one block up.
//!
//! `y_j = max(0, Σ_i x_i v_ij + a_j)`, `a_j = min(0, Σ_l R_l v_lj + d_j)`,
//! `R̂_k = Σ_{j∈k} y_j`. Because `a_j ≤ 0`, the surrogate is itself a
//! detection layer with nonpositive biases and can be decomposed by the
//! root-point rules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::engine::{backward, check_domain};
use super::rules::propagate;
use super::{Heatmap, HeatmapSource, LayerSum, RelevanceError, RelevanceRule, Result, RuleAssignment, RuleKind};
use crate::network::{ActivationTrace, DetectionLayer, Network, PixelBounds, TrainConfig};
use crate::tensor::{matmul, matmul_transpose_lhs, Tensor};

/// SGD step size for the min-max fit. The targets are a few units per pooled
/// neuron, so this is larger than the network's own rate.
pub const DEFAULT_MINMAX_LEARNING_RATE: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxModel {
    block: usize,
    /// `v_ij`, `[d_in, m]`, as a zero-bias detection layer whose weights are
    /// shared by every per-input surrogate.
    bottom: DetectionLayer,
    /// `v_lj`, `[upper, m]`.
    top: Tensor,
    /// `d_j`, `[m]`.
    offset: Tensor,
    group_size: usize,
}

fn surrogate(bottom: Tensor) -> Result<DetectionLayer> {
    let (_, m) = bottom.dims2()?;
    Ok(DetectionLayer::new(bottom, Tensor::zeros(vec![m])?, true)?)
}

impl MinMaxModel {
    pub fn new(block: usize, bottom: Tensor, top: Tensor, offset: Tensor, group_size: usize) -> Result<Self> {
        let (_, m) = bottom.dims2()?;
        let (_, m2) = top.dims2()?;
        if m2 != m || offset.len() != m || offset.rank() != 1 {
            return Err(RelevanceError::InvalidRule(format!(
                "min-max parameter shapes disagree: bottom {:?}, top {:?}, offset {:?}",
                bottom.shape(),
                top.shape(),
                offset.shape()
            )));
        }
        if group_size == 0 || m % group_size != 0 {
            return Err(RelevanceError::InvalidRule(format!(
                "{m} min-max units cannot be pooled in groups of {group_size}"
            )));
        }
        Ok(Self {
            block,
            bottom: surrogate(bottom)?,
            top,
            offset,
            group_size,
        })
    }

    /// Independent `N(0, std)` weights and zero offsets.
    pub fn random(
        block: usize,
        d_in: usize,
        upper: usize,
        units: usize,
        group_size: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| RelevanceError::InvalidRule(e.to_string()))?;
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        let bottom = Tensor::matrix(d_in, units, draw(d_in * units))?;
        let top = Tensor::matrix(upper, units, draw(upper * units))?;
        Self::new(block, bottom, top, Tensor::zeros(vec![units])?, group_size)
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn bottom(&self) -> &Tensor {
        self.bottom.weights()
    }

    pub fn top(&self) -> &Tensor {
        &self.top
    }

    pub fn offset(&self) -> &Tensor {
        &self.offset
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn input_dim(&self) -> usize {
        self.bottom.input_dim()
    }

    pub fn upper_dim(&self) -> usize {
        self.top.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.offset.len()
    }

    /// Number of modelled relevances `R̂_k`.
    pub fn outputs(&self) -> usize {
        self.units() / self.group_size
    }

    /// `a_j = min(0, Σ_l R_l v_lj + d_j)`.
    pub fn effective_bias(&self, upper: &Tensor) -> Result<Tensor> {
        if upper.len() != self.upper_dim() {
            return Err(RelevanceError::InvalidRule(format!(
                "min-max model expects {} upper relevances, got {}",
                self.upper_dim(),
                upper.len()
            )));
        }
        let s = matmul_transpose_lhs(&self.top, &upper.flatten().as_column())?;
        Ok(s.flatten().add(&self.offset)?.map(|v| v.min(0.0)))
    }

    /// The surrogate detection layer for given upper relevances.
    pub fn detection_layer(&self, upper: &Tensor) -> Result<DetectionLayer> {
        Ok(self.bottom.with_biases(self.effective_bias(upper)?)?)
    }

    /// `R̂_k` for every group.
    pub fn predict(&self, x: &Tensor, upper: &Tensor) -> Result<Tensor> {
        let y = self.detection_layer(upper)?.forward(&x.flatten())?;
        let g = self.group_size;
        Ok(Tensor::new(
            vec![self.outputs()],
            y.data().chunks(g).map(|c| c.iter().sum()).collect(),
        )?)
    }
}

/// One training example: block input, relevance of the detection units one
/// block up, and the true pooled relevance.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxSample {
    pub input: Tensor,
    pub upper: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MinMaxInit {
    /// Independent `N(0, weight_init_std)` weights, zero offsets.
    Random,
    /// Bottom weights and offsets copied from the modelled detection layer,
    /// top-down weights drawn from `N(0, weight_init_std)`.
    FromLayer,
    /// Continue from an existing model.
    Warm(Box<MinMaxModel>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxReport {
    pub iterations: usize,
    /// Mean over samples of `Σ_k (R̂_k − R_k)²`.
    pub initial_mse: f64,
    pub final_mse: f64,
}

fn modelled_block(net: &Network, block: usize) -> Result<()> {
    if block + 1 >= net.num_blocks() {
        return Err(RelevanceError::InvalidRule(format!(
            "a min-max model needs a block above it; block {block} of {} has none",
            net.num_blocks()
        )));
    }
    Ok(())
}

/// Upper relevances `R_l` (detection units of block `block + 1`) obtained
/// by the z⁺-rule from the output down.
fn upper_relevance(net: &Network, trace: &ActivationTrace, block: usize, sums: &mut Vec<LayerSum>) -> Result<Tensor> {
    let top = net.layers().len();
    let rules = RuleAssignment::uniform(RelevanceRule::zplus(), net.num_blocks());
    backward(
        net,
        trace,
        &rules,
        top,
        Tensor::vector(vec![trace.output()])?,
        2 * block + 3,
        sums,
    )
}

/// Builds training data for the min-max model of `block`. The target is
/// the z⁺ relevance of the pooled units, one layer below the upper
/// relevances.
pub fn minmax_samples(net: &Network, block: usize, inputs: &[Tensor]) -> Result<Vec<MinMaxSample>> {
    modelled_block(net, block)?;
    let rules = RuleAssignment::uniform(RelevanceRule::zplus(), net.num_blocks());
    inputs
        .iter()
        .map(|x| {
            let trace = net.forward(x)?;
            let mut sums = Vec::new();
            let upper = upper_relevance(net, &trace, block, &mut sums)?;
            let target = backward(
                net,
                &trace,
                &rules,
                2 * block + 3,
                upper.clone(),
                2 * block + 2,
                &mut sums,
            )?;
            Ok(MinMaxSample {
                input: trace.layer_input(2 * block).flatten(),
                upper,
                target,
            })
        })
        .collect()
}

fn mean_fit_error(model: &MinMaxModel, samples: &[MinMaxSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = model.predict(&s.input, &s.upper)?;
        total += p
            .data()
            .iter()
            .zip(s.target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

fn stack(rows: &[&Tensor]) -> Tensor {
    let width = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_parts(vec![rows.len(), width], data)
}

/// Fits a min-max model of `block` by minibatch SGD on the squared error
/// between `R̂_k` and the true `R_k`.
pub fn train_minmax(
    net: &Network,
    block: usize,
    samples: &[MinMaxSample],
    cfg: &TrainConfig,
    init: &MinMaxInit,
) -> Result<(MinMaxModel, MinMaxReport)> {
    modelled_block(net, block)?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(RelevanceError::EmptyData);
    }
    let det = net.detection(block);
    let group = net.pooling(block).group_size();
    let upper_dim = net.detection(block + 1).output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MinMaxModel::random(
        block,
        det.input_dim(),
        upper_dim,
        det.output_dim(),
        group,
        cfg.weight_init_std,
        &mut rng,
    )?;
    match init {
        MinMaxInit::Random => {}
        MinMaxInit::FromLayer => {
            model.bottom = surrogate(det.weights().clone())?;
            model.offset = det.biases().map(|b| b.min(0.0));
        }
        MinMaxInit::Warm(start) => {
            if (start.block, start.bottom().shape(), start.top.shape(), start.group_size)
                != (block, model.bottom().shape(), model.top.shape(), group)
            {
                return Err(RelevanceError::InvalidRule(
                    "warm-start model does not match the modelled block".into(),
                ));
            }
            model = (**start).clone();
        }
    }
    for s in samples {
        if s.input.len() != model.input_dim() || s.upper.len() != upper_dim || s.target.len() != model.outputs() {
            return Err(RelevanceError::InvalidRule(format!(
                "min-max sample has extents ({}, {}, {}), expected ({}, {upper_dim}, {})",
                s.input.len(),
                s.upper.len(),
                s.target.len(),
                model.input_dim(),
                model.outputs()
            )));
        }
    }

    let initial_mse = mean_fit_error(&model, samples)?;
    let m = model.units();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    for iteration in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.minibatch_size);
        while picked.len() < cfg.minibatch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let b = picked.len();
        let x = stack(&picked.iter().map(|&i| &samples[i].input).collect::<Vec<_>>());
        let u = stack(&picked.iter().map(|&i| &samples[i].upper).collect::<Vec<_>>());

        let s = matmul(&u, &model.top)?.into_data();
        let mut p = matmul(&x, model.bottom())?.into_data();
        let od = model.offset.data();
        for row in 0..b {
            for j in 0..m {
                p[row * m + j] += (s[row * m + j] + od[j]).min(0.0);
            }
        }
        let mut g_pre = vec![0.0; b * m];
        let mut g_s = vec![0.0; b * m];
        let mut loss = 0.0;
        for (row, &i) in picked.iter().enumerate() {
            let target = samples[i].target.data();
            for (k, &t) in target.iter().enumerate() {
                let units = row * m + k * group..row * m + (k + 1) * group;
                let rhat: f64 = p[units.clone()].iter().map(|v| v.max(0.0)).sum();
                let e = rhat - t;
                loss += e * e;
                for idx in units {
                    if p[idx] > 0.0 {
                        g_pre[idx] = 2.0 * e / b as f64;
                        let j = idx - row * m;
                        if s[idx] + od[j] < 0.0 {
                            g_s[idx] = g_pre[idx];
                        }
                    }
                }
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(RelevanceError::Diverged { iteration, loss });
        }
        let g_pre = Tensor::from_parts(vec![b, m], g_pre);
        let g_s = Tensor::from_parts(vec![b, m], g_s);
        let grad_bottom = matmul_transpose_lhs(&x, &g_pre)?;
        let grad_top = matmul_transpose_lhs(&u, &g_s)?;
        let mut grad_offset = vec![0.0; m];
        for row in g_s.data().chunks(m) {
            for (g, &v) in grad_offset.iter_mut().zip(row) {
                *g += v;
            }
        }
        let lr = cfg.learning_rate;
        model.bottom = surrogate(model.bottom().sub(&grad_bottom.scale(lr))?)?;
        model.top = model.top.sub(&grad_top.scale(lr))?;
        model.offset = model.offset.sub(&Tensor::from_parts(vec![m], grad_offset).scale(lr))?;
    }
    let final_mse = mean_fit_error(&model, samples)?;
    if !final_mse.is_finite() {
        return Err(RelevanceError::Diverged {
            iteration: cfg.iterations,
            loss: final_mse,
        });
    }
    Ok((
        model,
        MinMaxReport {
            iterations: cfg.iterations,
            initial_mse,
            final_mse,
        },
    ))
}

fn check_surrogate_rule(rule: &RelevanceRule) -> Result<()> {
    if matches!(rule.kind(), RuleKind::W2 | RuleKind::ZPlus | RuleKind::ZBox { .. }) {
        Ok(())
    } else {
        Err(RelevanceError::InvalidRule(format!(
            "min-max models are decomposed with w2, zplus or zbox, not {}",
            rule.name()
        )))
    }
}

/// Decomposes `R̂ = Σ_j y_j` of the surrogate layer onto its inputs.
/// `bounds` serves z^B rules without bounds of their own.
pub fn minmax_decompose(
    model: &MinMaxModel,
    x: &Tensor,
    upper: &Tensor,
    rule: &RelevanceRule,
    bounds: Option<&PixelBounds>,
) -> Result<Tensor> {
    check_surrogate_rule(rule)?;
    let layer = model.detection_layer(upper)?;
    let x = x.flatten();
    let y = layer.forward(&x)?;
    Ok(propagate(rule, &layer, &x, &y, bounds)?.input)
}

/// Full heatmap: z⁺ from the output down to the detection units above the
/// modelled block, the min-max surrogate with `rule` for the block itself,
/// and the training-free assignment for any blocks below.
pub fn minmax_heatmap(
    net: &Network,
    model: &MinMaxModel,
    trace: &ActivationTrace,
    rule: &RelevanceRule,
) -> Result<Heatmap> {
    check_surrogate_rule(rule)?;
    let b = model.block();
    modelled_block(net, b)?;
    let top = net.layers().len();
    let f = trace.output();
    let mut sums = vec![LayerSum {
        layer: top,
        relevance: f,
        bias: 0.0,
    }];
    let upper = upper_relevance(net, trace, b, &mut sums)?;

    let mut rules = RuleAssignment::training_free(net).rules().to_vec();
    rules[b] = rule.clone();
    let rules = RuleAssignment::new(rules);
    check_domain(net, &rules, b, 2 * b)?;

    let layer = model.detection_layer(&upper)?;
    let x = trace.layer_input(2 * b).flatten();
    let y = layer.forward(&x)?;
    let estimate = y.sum();
    sums.push(LayerSum {
        layer: 2 * b + 2,
        relevance: estimate,
        bias: 0.0,
    });
    sums.push(LayerSum {
        layer: 2 * b + 1,
        relevance: estimate,
        bias: 0.0,
    });
    let fallback = if b == 0 { net.bounds() } else { None };
    let p = propagate(rule, &layer, &x, &y, fallback).map_err(|e| e.at_layer(2 * b))?;
    sums.push(LayerSum {
        layer: 2 * b,
        relevance: p.input.sum(),
        bias: p.bias.sum(),
    });
    let r = backward(net, trace, &rules, 2 * b, p.input, 0, &mut sums)?;
    Ok(Heatmap {
        relevance: r.reshape(net.input_shape().to_vec())?,
        output: f,
        source: HeatmapSource::MinMax {
            rule: rule.clone(),
            estimate,
        },
        layer_sums: sums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::PoolingLayer;

    fn two_block_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d0 = DetectionLayer::random(6, 8, 0.5, &mut rng).unwrap();
        let mut d1 = DetectionLayer::random(4, 6, 0.5, &mut rng).unwrap();
        // Strictly negative biases so z⁺ targets are well defined.
        d0 = DetectionLayer::new(d0.weights().clone(), Tensor::full(vec![8], -0.05).unwrap(), true).unwrap();
        d1 = DetectionLayer::new(
            d1.weights().clone().map(f64::abs),
            Tensor::full(vec![6], -0.01).unwrap(),
            true,
        )
        .unwrap();
        Network::from_blocks(
            vec![6],
            vec![(d0, PoolingLayer::sum(2).unwrap()), (d1, PoolingLayer::sum(6).unwrap())],
            Some(PixelBounds::uniform(6, -0.5, 1.5).unwrap()),
        )
        .unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Vec<Tensor> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::vector((0..6).map(|_| rng.gen_range(-0.5..1.5)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn inhibited_units_pass_nothing() {
        let model = MinMaxModel::new(
            0,
            Tensor::full(vec![3, 2], 1.0).unwrap(),
            Tensor::full(vec![1, 2], 1.0).unwrap(),
            Tensor::full(vec![2], -100.0).unwrap(),
            2,
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let upper = Tensor::vector(vec![0.0]).unwrap();
        let r = minmax_decompose(&model, &x, &upper, &RelevanceRule::w2(), None).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_active_unit_carries_everything() {
        let model = MinMaxModel::new(
            0,
            Tensor::matrix(2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap(),
            Tensor::full(vec![1, 2], 0.0).unwrap(),
            Tensor::vector(vec![-0.5, 0.0]).unwrap(),
            2,
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let upper = Tensor::vector(vec![1.0]).unwrap();
        assert_eq!(model.predict(&x, &upper).unwrap().data(), &[1.5]);
        let r = minmax_decompose(&model, &x, &upper, &RelevanceRule::zplus(), None).unwrap();
        assert!((r.sum() - 1.5).abs() < 1e-12);
    }

    fn teacher_samples(net: &Network, teacher: &MinMaxModel) -> Vec<MinMaxSample> {
        minmax_samples(net, 0, &inputs(200, 3))
            .unwrap()
            .into_iter()
            .map(|mut s| {
                s.target = teacher.predict(&s.input, &s.upper).unwrap();
                s
            })
            .collect()
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let net = two_block_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let teacher = MinMaxModel::random(0, 6, 6, 8, 2, 0.5, &mut rng).unwrap();
        let samples = teacher_samples(&net, &teacher);
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let (untrained, rep) = train_minmax(&net, 0, &samples, &cfg, &MinMaxInit::Random).unwrap();
        assert_eq!(rep.initial_mse, rep.final_mse);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        assert_eq!(
            untrained,
            MinMaxModel::random(0, 6, 6, 8, 2, cfg.weight_init_std, &mut rng).unwrap()
        );
    }

    #[test]
    fn representable_targets_are_fit() {
        let net = two_block_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let teacher = MinMaxModel::random(0, 6, 6, 8, 2, 0.5, &mut rng).unwrap();
        let samples = teacher_samples(&net, &teacher);
        assert_eq!(mean_fit_error(&teacher, &samples).unwrap(), 0.0);

        let cfg = TrainConfig {
            iterations: 20_000,
            learning_rate: 0.02,
            minibatch_size: 10,
            weight_init_std: 0.5,
            seed: 9,
        };
        // From scratch the fit can stall on dead units, so only a large
        // reduction is required.
        let (_, rep) = train_minmax(&net, 0, &samples, &cfg, &MinMaxInit::Random).unwrap();
        assert!(rep.final_mse < 0.01 * rep.initial_mse, "{rep:?}");

        // Near the teacher the fit closes the gap.
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut jitter = |t: &Tensor| {
            let data = t.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let start = MinMaxModel::new(
            0,
            jitter(teacher.bottom()),
            jitter(teacher.top()),
            teacher.offset().clone(),
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 100_000,
            ..cfg
        };
        let (fitted, rep) = train_minmax(&net, 0, &samples, &cfg, &MinMaxInit::Warm(Box::new(start))).unwrap();
        assert!(rep.final_mse < 1e-4 * rep.initial_mse, "{rep:?}");
        let mut gap = 0.0;
        for s in &samples {
            let r = minmax_decompose(&fitted, &s.input, &s.upper, &RelevanceRule::zbox(), net.bounds()).unwrap();
            let estimate = fitted.predict(&s.input, &s.upper).unwrap().sum();
            assert!((r.sum() - estimate).abs() <= 1e-9 * estimate.max(1.0));
            gap += (r.sum() - s.target.sum()).abs();
        }
        assert!(gap / (samples.len() as f64) < 1e-3, "{gap}");
    }

    #[test]
    fn surrogate_decomposition_is_conservative() {
        let net = two_block_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MinMaxModel::random(0, 6, 6, 8, 2, 0.5, &mut rng).unwrap();
        for x in inputs(50, 5) {
            let trace = net.forward(&x).unwrap();
            let h = minmax_heatmap(&net, &model, &trace, &RelevanceRule::zbox()).unwrap();
            let HeatmapSource::MinMax { estimate, .. } = h.source else {
                panic!()
            };
            assert!((h.total() - estimate).abs() <= 1e-9 * estimate.max(1e-9), "{h:?}");
            assert!(h.min() >= -1e-12);
        }
    }

    #[test]
    fn zplus_surrogate_on_signed_pixels_is_rejected() {
        let net = two_block_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MinMaxModel::random(0, 6, 6, 8, 2, 0.5, &mut rng).unwrap();
        let trace = net.forward(&inputs(1, 1)[0]).unwrap();
        assert!(matches!(
            minmax_heatmap(&net, &model, &trace, &RelevanceRule::zplus()),
            Err(RelevanceError::Domain { layer: 0, .. })
        ));
    }
}
