//! Weight-space merging of checkpoints trained on disjoint data subsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Provenance};
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::policy::{self, BcDataset, PolicyLayout, PolicyNet, TrainConfig};
use crate::rng::Rng;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    alphas: Vec<f64>,
}

impl MergeCoefficients {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty()
            || alphas.iter().any(|a| !a.is_finite() || *a < 0.0)
            || (alphas.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::Simplex(format!("{alphas:?}")));
        }
        Ok(Self { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSet {
    pub checkpoints: Vec<ParameterVector>,
    pub labels: Vec<String>,
}

impl CheckpointSet {
    pub fn new(checkpoints: Vec<ParameterVector>, labels: Vec<String>) -> Result<Self> {
        let first = checkpoints.first().ok_or(Error::Empty("checkpoint set"))?;
        for c in &checkpoints[1..] {
            first.check_compatible(c)?;
        }
        if labels.len() != checkpoints.len() {
            return Err(Error::Dimension {
                expected: checkpoints.len(),
                got: labels.len(),
            });
        }
        Ok(Self { checkpoints, labels })
    }

    pub fn unlabeled(checkpoints: Vec<ParameterVector>) -> Result<Self> {
        let labels = (0..checkpoints.len()).map(|i| format!("subset_{i}")).collect();
        Self::new(checkpoints, labels)
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

/// `Σ α_i θ_i`. Coordinates on which all checkpoints agree are copied
/// unchanged.
pub fn merge(cs: &CheckpointSet, c: &MergeCoefficients) -> Result<ParameterVector> {
    if c.len() != cs.len() {
        return Err(Error::Dimension {
            expected: cs.len(),
            got: c.len(),
        });
    }
    MergeCoefficients::new(c.alphas.clone())?;
    let first = &cs.checkpoints[0];
    let out = (0..first.len())
        .map(|j| {
            let v0 = first.values()[j];
            if cs.checkpoints.iter().all(|p| p.values()[j] == v0) {
                v0
            } else {
                cs.checkpoints
                    .iter()
                    .zip(c.alphas())
                    .map(|(p, a)| a * p.values()[j])
                    .sum()
            }
        })
        .collect();
    ParameterVector::new(first.layout_id(), out)
}

/// Something that scores a parameter vector, with a gradient.
pub trait ValidationObjective {
    fn loss(&self, theta: &ParameterVector) -> Result<f64>;
    fn loss_and_grad(&self, theta: &ParameterVector) -> Result<(f64, Vec<f64>)>;
}

/// Held-out behavior-cloning loss of a policy.
pub struct PolicyValidation<'a> {
    pub layout: &'a PolicyLayout,
    pub data: &'a BcDataset,
}

impl ValidationObjective for PolicyValidation<'_> {
    fn loss(&self, theta: &ParameterVector) -> Result<f64> {
        policy::validation_loss(theta, self.layout, self.data)
    }

    fn loss_and_grad(&self, theta: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        let (l, g) = policy::validation_loss_and_grad(theta, self.layout, self.data)?;
        Ok((l, g.into_values()))
    }
}

/// `Σ_j w_j (θ_j - c_j)²`.
pub struct Quadratic {
    pub center: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadratic {
    pub fn isotropic(center: Vec<f64>) -> Self {
        let weights = vec![1.0; center.len()];
        Self { center, weights }
    }
}

impl ValidationObjective for Quadratic {
    fn loss(&self, theta: &ParameterVector) -> Result<f64> {
        Ok(self.loss_and_grad(theta)?.0)
    }

    fn loss_and_grad(&self, theta: &ParameterVector) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.center.len() {
            return Err(Error::Dimension {
                expected: self.center.len(),
                got: theta.len(),
            });
        }
        let mut loss = 0.0;
        let grad = theta
            .values()
            .iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((t, c), w)| {
                loss += w * (t - c) * (t - c);
                2.0 * w * (t - c)
            })
            .collect();
        Ok((loss, grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Average,
    InverseLoss,
    Gradient,
    Greedy,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 4] = [
        MergeStrategy::Average,
        MergeStrategy::InverseLoss,
        MergeStrategy::Gradient,
        MergeStrategy::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Average => "average",
            MergeStrategy::InverseLoss => "inverse_loss",
            MergeStrategy::Gradient => "gradient",
            MergeStrategy::Greedy => "greedy",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeStrategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValSplit {
    #[serde(rename = "in")]
    InDomain,
    #[serde(rename = "ood")]
    Ood,
}

impl ValSplit {
    pub fn name(self) -> &'static str {
        match self {
            ValSplit::InDomain => "in",
            ValSplit::Ood => "ood",
        }
    }
}

impl fmt::Display for ValSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" | "in_domain" => Ok(ValSplit::InDomain),
            "ood" => Ok(ValSplit::Ood),
            _ => Err(Error::Config(format!("unknown validation split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    pub iters: usize,
    pub step: f64,
    pub adaptive: bool,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            step: 0.5,
            adaptive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub p: f64,
    pub epsilon: f64,
    pub gradient: GradientConfig,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            epsilon: 1e-8,
            gradient: GradientConfig::default(),
        }
    }
}

pub fn strategy_average(cs: &CheckpointSet) -> MergeCoefficients {
    let n = cs.len();
    MergeCoefficients {
        alphas: vec![1.0 / n as f64; n],
    }
}

/// `α_i ∝ (L_i + ε)^(-p)`.
pub fn inverse_loss_alphas(losses: &[f64], p: f64, epsilon: f64) -> Result<MergeCoefficients> {
    if !(p > 0.0) || !(epsilon > 0.0) {
        return Err(Error::Config("inverse-loss weighting needs p > 0 and epsilon > 0".into()));
    }
    let raw: Vec<f64> = losses.iter().map(|l| (l + epsilon).powf(-p)).collect();
    let total: f64 = raw.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Simplex(format!("inverse-loss weights {raw:?}")));
    }
    MergeCoefficients::new(raw.iter().map(|r| r / total).collect())
}

pub fn checkpoint_losses(cs: &CheckpointSet, obj: &dyn ValidationObjective) -> Result<Vec<f64>> {
    cs.checkpoints.iter().map(|c| obj.loss(c)).collect()
}

pub fn strategy_inverse_loss(
    cs: &CheckpointSet,
    obj: &dyn ValidationObjective,
    p: f64,
    epsilon: f64,
) -> Result<MergeCoefficients> {
    inverse_loss_alphas(&checkpoint_losses(cs, obj)?, p, epsilon)
}

fn softmax(w: &[f64]) -> Vec<f64> {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Coefficient trajectory of the softmax-parameterized descent, one entry per
/// evaluated iterate: `(alphas, loss)`.
pub fn gradient_path(
    cs: &CheckpointSet,
    obj: &dyn ValidationObjective,
    cfg: &GradientConfig,
) -> Result<Vec<(Vec<f64>, f64)>> {
    if cfg.iters == 0 {
        return Err(Error::Config("gradient strategy needs at least one iteration".into()));
    }
    let n = cs.len();
    let mut w = vec![0.0; n];
    let mut adam = policy::Adam::new(n);
    let mut path = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let alphas = softmax(&w);
        let theta = merge(cs, &MergeCoefficients { alphas: alphas.clone() })?;
        let (loss, g) = obj.loss_and_grad(&theta)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: it, loss });
        }
        path.push((alphas.clone(), loss));
        if it == cfg.iters || n == 1 {
            break;
        }
        let d_alpha: Vec<f64> = cs
            .checkpoints
            .iter()
            .map(|c| c.values().iter().zip(&g).map(|(a, b)| a * b).sum())
            .collect();
        let mean: f64 = alphas.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let d_w: Vec<f64> = alphas.iter().zip(&d_alpha).map(|(a, d)| a * (d - mean)).collect();
        if cfg.adaptive {
            adam.step(&mut w, &d_w, cfg.step);
        } else {
            w.iter_mut().zip(&d_w).for_each(|(x, d)| *x -= cfg.step * d);
        }
    }
    Ok(path)
}

/// Softmax-parameterized gradient descent from uniform coefficients,
/// returning the best iterate seen.
pub fn strategy_gradient(
    cs: &CheckpointSet,
    obj: &dyn ValidationObjective,
    cfg: &GradientConfig,
) -> Result<MergeCoefficients> {
    let path = gradient_path(cs, obj, cfg)?;
    let (best, _) = path
        .iter()
        .fold(None::<&(Vec<f64>, f64)>, |acc, x| match acc {
            Some(b) if b.1 <= x.1 => Some(b),
            _ => Some(x),
        })
        .expect("nonempty path");
    renormalized(best)
}

fn renormalized(a: &[f64]) -> Result<MergeCoefficients> {
    let s: f64 = a.iter().sum();
    MergeCoefficients::new(a.iter().map(|x| x / s).collect())
}

/// Greedy soup outcome: coefficients plus the accepted-loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedySoup {
    pub coefficients: MergeCoefficients,
    pub counts: Vec<usize>,
    pub history: Vec<f64>,
}

pub fn greedy_soup(cs: &CheckpointSet, obj: &dyn ValidationObjective) -> Result<GreedySoup> {
    let losses = checkpoint_losses(cs, obj)?;
    let n = cs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut counts = vec![0usize; n];
    counts[order[0]] = 1;
    let mut current = losses[order[0]];
    let mut history = vec![current];
    let coeffs = |counts: &[usize]| {
        let total: usize = counts.iter().sum();
        MergeCoefficients {
            alphas: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        }
    };
    let offers = order[1..].iter().chain(order.iter());
    for &i in offers {
        counts[i] += 1;
        let trial = obj.loss(&merge(cs, &coeffs(&counts))?)?;
        if trial < current {
            current = trial;
            history.push(trial);
        } else {
            counts[i] -= 1;
        }
    }
    Ok(GreedySoup {
        coefficients: coeffs(&counts),
        counts,
        history,
    })
}

pub fn strategy_greedy(cs: &CheckpointSet, obj: &dyn ValidationObjective) -> Result<MergeCoefficients> {
    Ok(greedy_soup(cs, obj)?.coefficients)
}

pub fn coefficients(
    strategy: MergeStrategy,
    cs: &CheckpointSet,
    obj: &dyn ValidationObjective,
    cfg: &MergeConfig,
) -> Result<MergeCoefficients> {
    match strategy {
        MergeStrategy::Average => Ok(strategy_average(cs)),
        MergeStrategy::InverseLoss => strategy_inverse_loss(cs, obj, cfg.p, cfg.epsilon),
        MergeStrategy::Gradient => strategy_gradient(cs, obj, &cfg.gradient),
        MergeStrategy::Greedy => strategy_greedy(cs, obj),
    }
}

/// Expert training pool and the two validation sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Episode>,
    pub in_domain_val: Vec<Episode>,
    pub ood_val: Vec<Episode>,
}

/// Holds out 10% of the expert episodes in-domain; the DAgger-style episodes
/// form the out-of-distribution split.
pub fn build_validation_splits(expert: &[Episode], dagger: &[Episode], rng: &mut Rng) -> Result<Splits> {
    if expert.is_empty() || dagger.is_empty() {
        return Err(Error::Empty("expert and dagger sets"));
    }
    if let Some(e) = dagger
        .iter()
        .find(|e| !matches!(e.provenance, Provenance::Dagger | Provenance::HeuristicDagger))
    {
        return Err(Error::Config(format!(
            "episode {} with provenance {:?} cannot validate out of distribution",
            e.id, e.provenance
        )));
    }
    let mut idx: Vec<usize> = (0..expert.len()).collect();
    rng.shuffle(&mut idx);
    let n_val = ((expert.len() as f64) * 0.1).round() as usize;
    let mut held: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    let splits = Splits {
        train: train.iter().map(|&i| expert[i].clone()).collect(),
        in_domain_val: held.iter().map(|&i| expert[i].clone()).collect(),
        ood_val: dagger.to_vec(),
    };
    check_disjoint(&[&splits.train], &[&splits.in_domain_val, &splits.ood_val])?;
    Ok(splits)
}

/// Fails with the first episode id shared between any training and any
/// validation set.
pub fn check_disjoint(train: &[&[Episode]], val: &[&[Episode]]) -> Result<()> {
    let ids: std::collections::BTreeSet<u64> = train.iter().flat_map(|s| s.iter().map(|e| e.id)).collect();
    for v in val.iter().flat_map(|s| s.iter()) {
        if ids.contains(&v.id) {
            return Err(Error::SplitOverlap(v.id));
        }
    }
    Ok(())
}

/// Uniform random partition into `n` non-overlapping subsets of near-equal
/// size.
pub fn partition(episodes: &[Episode], n: usize, rng: &mut Rng) -> Result<Vec<Vec<Episode>>> {
    if n == 0 || episodes.len() < n {
        return Err(Error::Config(format!(
            "cannot split {} episodes into {n} subsets",
            episodes.len()
        )));
    }
    let mut idx: Vec<usize> = (0..episodes.len()).collect();
    rng.shuffle(&mut idx);
    let mut out = vec![Vec::new(); n];
    for (j, i) in idx.into_iter().enumerate() {
        out[j % n].push(episodes[i].clone());
    }
    Ok(out)
}

/// One policy per subset, all from the same initialization.
pub fn train_checkpoints(
    subsets: &[Vec<Episode>],
    layout: &PolicyLayout,
    tc: &TrainConfig,
    init_seed: u64,
) -> Result<CheckpointSet> {
    let init = policy::init_policy(layout, &mut Rng::new(init_seed).split_named("policy-init"))?;
    fine_tune_checkpoints(subsets, &init, tc)
}

/// One policy per subset, each fine-tuned from `base`.
pub fn fine_tune_checkpoints(subsets: &[Vec<Episode>], base: &PolicyNet, tc: &TrainConfig) -> Result<CheckpointSet> {
    let layout = &base.layout;
    let init = base;
    let mut ckpts = Vec::with_capacity(subsets.len());
    for (i, s) in subsets.iter().enumerate() {
        let data = BcDataset::from_episodes(s, layout)?;
        let cfg = TrainConfig {
            seed: Rng::new(tc.seed).split(i as u64).seed(),
            ..tc.clone()
        };
        ckpts.push(policy::train(init, &data, None, &cfg)?.net.params);
    }
    CheckpointSet::unlabeled(ckpts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub single_best_index: usize,
    pub single_best_loss: f64,
    pub full_data_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub strategy: MergeStrategy,
    pub split: ValSplit,
    pub alphas: Vec<f64>,
    pub per_ckpt_loss: Vec<f64>,
    pub merged_loss: f64,
    pub baselines: Baselines,
}

impl MergeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Argmin of the losses, ties to the lower index.
pub fn single_best(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = i;
        }
    }
    best
}

/// Coefficients and report for already-trained checkpoints.
pub fn merge_checkpoints(
    cs: &CheckpointSet,
    strategy: MergeStrategy,
    split: ValSplit,
    obj: &dyn ValidationObjective,
    cfg: &MergeConfig,
    full_data: Option<&ParameterVector>,
) -> Result<(ParameterVector, MergeReport)> {
    let per_ckpt_loss = checkpoint_losses(cs, obj)?;
    let c = coefficients(strategy, cs, obj, cfg)?;
    let merged = merge(cs, &c)?;
    let best = single_best(&per_ckpt_loss);
    let report = MergeReport {
        strategy,
        split,
        alphas: c.alphas().to_vec(),
        merged_loss: obj.loss(&merged)?,
        baselines: Baselines {
            single_best_index: best,
            single_best_loss: per_ckpt_loss[best],
            full_data_loss: full_data.map(|p| obj.loss(p)).transpose()?,
        },
        per_ckpt_loss,
    };
    Ok((merged, report))
}

/// Output of [`run_model_arithmetic`].
#[derive(Clone, Debug)]
pub struct ModelArithmetic {
    pub checkpoints: CheckpointSet,
    pub full_data: PolicyNet,
    pub merged: ParameterVector,
    pub report: MergeReport,
}

/// Trains a policy per subset plus one on their union, then merges the
/// subset policies against `val`.
#[allow(clippy::too_many_arguments)]
pub fn run_model_arithmetic(
    subsets: &[Vec<Episode>],
    layout: &PolicyLayout,
    tc: &TrainConfig,
    strategy: MergeStrategy,
    split: ValSplit,
    val: &BcDataset,
    cfg: &MergeConfig,
    init_seed: u64,
) -> Result<ModelArithmetic> {
    if subsets.len() < 2 {
        return Err(Error::Config("model arithmetic needs at least two subsets".into()));
    }
    let refs: Vec<&[Episode]> = subsets.iter().map(Vec::as_slice).collect();
    for (i, a) in refs.iter().enumerate() {
        check_disjoint(&[a], &refs[i + 1..])?;
    }
    let cs = train_checkpoints(subsets, layout, tc, init_seed)?;
    let union: Vec<Episode> = subsets.iter().flatten().cloned().collect();
    let init = policy::init_policy(layout, &mut Rng::new(init_seed).split_named("policy-init"))?;
    let full = policy::train(&init, &BcDataset::from_episodes(&union, layout)?, None, tc)?.net;
    let obj = PolicyValidation { layout, data: val };
    let (merged, report) = merge_checkpoints(&cs, strategy, split, &obj, cfg, Some(&full.params))?;
    Ok(ModelArithmetic {
        checkpoints: cs,
        full_data: full,
        merged,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new("q", v.to_vec()).unwrap()
    }

    fn set(vs: &[&[f64]]) -> CheckpointSet {
        CheckpointSet::unlabeled(vs.iter().map(|v| pv(v)).collect()).unwrap()
    }

    #[test]
    fn merge_examples() {
        let cs = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let half = MergeCoefficients::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(merge(&cs, &half).unwrap().values(), &[0.5, 0.5]);
        let vertex = MergeCoefficients::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(merge(&cs, &vertex).unwrap(), cs.checkpoints[0]);
        let same = set(&[&[0.1, -0.7], &[0.1, -0.7], &[0.1, -0.7]]);
        let odd = MergeCoefficients::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(merge(&same, &odd).unwrap(), same.checkpoints[0]);
        assert!(matches!(MergeCoefficients::new(vec![0.6, 0.6]), Err(Error::Simplex(_))));
        assert!(matches!(MergeCoefficients::new(vec![1.2, -0.2]), Err(Error::Simplex(_))));
    }

    #[test]
    fn average_examples() {
        let cs = set(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert_eq!(strategy_average(&cs).alphas(), &[0.25; 4]);
        assert_eq!(strategy_average(&set(&[&[1.0]])).alphas(), &[1.0]);
    }

    #[test]
    fn inverse_loss_examples() {
        let a = inverse_loss_alphas(&[0.1, 0.3], 1.0, 1e-8).unwrap();
        assert!((a.alphas()[0] - 0.75).abs() < 1e-7);
        let eq = inverse_loss_alphas(&[0.2, 0.2, 0.2], 1.0, 1e-8).unwrap();
        assert!(eq.alphas().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let sharp = inverse_loss_alphas(&[0.1, 0.3], 50.0, 1e-8).unwrap();
        assert!(sharp.alphas()[0] > 0.999);
    }

    #[test]
    fn single_checkpoint_gradient_is_trivial() {
        let cs = set(&[&[1.0, 2.0]]);
        let q = Quadratic::isotropic(vec![0.0, 0.0]);
        let c = strategy_gradient(&cs, &q, &GradientConfig::default()).unwrap();
        assert_eq!(c.alphas(), &[1.0]);
    }

    #[test]
    fn gradient_moves_toward_the_minimizer() {
        let cs = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = Quadratic::isotropic(vec![1.0, 0.0]);
        for adaptive in [false, true] {
            let cfg = GradientConfig {
                iters: 10,
                adaptive,
                ..Default::default()
            };
            let path = gradient_path(&cs, &q, &cfg).unwrap();
            assert!(path.windows(2).all(|w| w[1].0[0] > w[0].0[0]));
        }
        let c = strategy_gradient(&cs, &q, &GradientConfig::default()).unwrap();
        let avg = q.loss(&merge(&cs, &strategy_average(&cs)).unwrap()).unwrap();
        assert!(q.loss(&merge(&cs, &c).unwrap()).unwrap() <= avg + 1e-9);
    }

    #[test]
    fn greedy_picks_only_helpful_checkpoints() {
        let cs = set(&[&[5.0], &[0.1], &[-4.0], &[9.0]]);
        let q = Quadratic::isotropic(vec![0.0]);
        let g = greedy_soup(&cs, &q).unwrap();
        assert_eq!(g.coefficients.alphas(), &[0.0, 1.0, 0.0, 0.0]);
        let same = set(&[&[1.0], &[1.0], &[1.0]]);
        assert_eq!(strategy_greedy(&same, &q).unwrap().alphas(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn greedy_history_is_monotone() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let vs: Vec<ParameterVector> = (0..4)
                .map(|_| pv(&(0..3).map(|_| rng.uniform_range(-1., 1.)).collect::<Vec<_>>()))
                .collect();
            let cs = CheckpointSet::unlabeled(vs).unwrap();
            let q = Quadratic::isotropic((0..3).map(|_| rng.uniform_range(-0.5, 0.5)).collect());
            let g = greedy_soup(&cs, &q).unwrap();
            assert!(g.history.windows(2).all(|w| w[1] < w[0]));
            let best = checkpoint_losses(&cs, &q).unwrap().into_iter().fold(f64::INFINITY, f64::min);
            let got = q.loss(&merge(&cs, &g.coefficients).unwrap()).unwrap();
            assert!(got <= best);
            assert!((got - g.history.last().unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cs = set(&[&[1.0, 0.3], &[0.2, -1.0], &[0.7, 0.7]]);
        let c = MergeCoefficients::new(vec![0.2, 0.5, 0.3]).unwrap();
        let p = set(&[&[0.7, 0.7], &[1.0, 0.3], &[0.2, -1.0]]);
        let pc = MergeCoefficients::new(vec![0.3, 0.2, 0.5]).unwrap();
        let a = merge(&cs, &c).unwrap();
        let b = merge(&p, &pc).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let a = ParameterVector::new("a", vec![1.0]).unwrap();
        let b = ParameterVector::new("b", vec![1.0]).unwrap();
        assert!(CheckpointSet::unlabeled(vec![a, b]).is_err());
    }

    #[test]
    fn strategy_names() {
        for s in MergeStrategy::ALL {
            assert_eq!(s.name().parse::<MergeStrategy>().unwrap(), s);
        }
        assert_eq!(serde_json::to_string(&ValSplit::Ood).unwrap(), "\"ood\"");
    }
}
