//! The desk-scale experiment protocol: data generation, training and
//! evaluation for each experiment family, memoized per seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{compute_metrics, evaluate, MetricsReport, SimConfig};
use crate::advantage::{fit_estimator, stability_metrics, step_indicators, AdvantageConfig, AdvantageVariant, Stability};
use crate::control::{SmoothingConfig, Strategy};
use crate::env::{
    augment_frameskip, augment_mirror, dagger_dataset, degraded_dataset, generate_expert_dataset,
    heuristic_dagger_dataset, DaggerConfig, DegradeOptions, EnvConfig, ExpertOptions, FailureKind,
};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::merge::{
    build_validation_splits, merge_checkpoints, partition, fine_tune_checkpoints, train_checkpoints, CheckpointSet, MergeConfig,
    MergeReport, MergeStrategy, PolicyValidation, ValSplit,
};
use crate::params::ParameterVector;
use crate::policy::{self, indicator_weights, BcDataset, PolicyLayout, PolicyNet, TrainConfig};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaProtocol {
    /// Expert pool before the 10% in-domain hold-out.
    pub n_expert: usize,
    pub n_subsets: usize,
    /// Heuristic-DAgger episodes forming the out-of-distribution split.
    pub n_ood: usize,
    /// Expert episodes for the shared base policy; 0 trains every checkpoint
    /// from scratch.
    pub n_pretrain: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub merge: MergeConfig,
}

impl Default for MaProtocol {
    fn default() -> Self {
        Self {
            n_expert: 222,
            n_subsets: 4,
            n_ood: 40,
            n_pretrain: 20,
            finetune_steps: 3000,
            finetune_lr: 3e-4,
            merge: MergeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataProtocol {
    pub n_expert: usize,
    pub n_heuristic_dagger: usize,
    pub failure_kinds: Vec<FailureKind>,
    pub n_dagger: usize,
    pub dagger: DaggerConfig,
    pub frameskip_prob: f64,
}

impl Default for DataProtocol {
    fn default() -> Self {
        Self {
            n_expert: 6,
            n_heuristic_dagger: 40,
            failure_kinds: FailureKind::ALL.to_vec(),
            n_dagger: 20,
            dagger: DaggerConfig::default(),
            frameskip_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageProtocol {
    pub n_episodes: usize,
    /// Share of episodes from the degraded operator.
    pub degraded_fraction: f64,
    pub degrade: DegradeOptions,
    pub estimator: AdvantageConfig,
    /// Episode cap used when evaluating these policies.
    pub eval_horizon: Option<u64>,
}

impl Default for AdvantageProtocol {
    fn default() -> Self {
        Self {
            n_episodes: 40,
            degraded_fraction: 0.3,
            degrade: DegradeOptions {
                noise_sigma: 0.012,
                ..DegradeOptions::default()
            },
            estimator: AdvantageConfig::default(),
            eval_horizon: None,
        }
    }
}

/// Per-frame advantage smoothness on expert episodes of the looped
/// waypoint course.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityProtocol {
    pub n_train: usize,
    pub n_test: usize,
    /// Smooth-frame threshold on the first difference.
    pub tau: f64,
    /// Frame offset of the scored advantage, for every estimator.
    pub span: usize,
    /// Score frames as observed, with the environment's observation noise.
    pub observed: bool,
    pub variants: Vec<AdvantageVariant>,
}

impl Default for StabilityProtocol {
    fn default() -> Self {
        Self {
            n_train: 30,
            n_test: 5,
            tau: 0.05,
            span: 1,
            observed: true,
            variants: vec![AdvantageVariant::ValueDiff, AdvantageVariant::Direct, AdvantageVariant::DirectStage],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlProtocol {
    pub n_expert: usize,
}

impl Default for ControlProtocol {
    fn default() -> Self {
        Self { n_expert: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub env: EnvConfig,
    pub policy: PolicyLayout,
    pub train: TrainConfig,
    pub expert: ExpertOptions,
    /// Simulation settings; its `env` is replaced by the protocol's.
    pub sim: SimConfig,
    pub eval_episodes: usize,
    pub ma: MaProtocol,
    pub data: DataProtocol,
    pub advantage: AdvantageProtocol,
    pub control: ControlProtocol,
    pub stability: StabilityProtocol,
}

impl Default for Protocol {
    fn default() -> Self {
        let env = EnvConfig {
            action_clip: 0.02,
            obs_noise_sigma: 0.02,
            ..EnvConfig::default()
        };
        Self {
            policy: PolicyLayout::for_env(&env, 50),
            train: TrainConfig {
                steps: 8000,
                batch: 64,
                lr: 1e-3,
                cosine_decay_steps: 8000,
                ..TrainConfig::default()
            },
            expert: ExpertOptions {
                noise_sigma: 0.004,
                ..ExpertOptions::default()
            },
            sim: SimConfig::default(),
            eval_episodes: 50,
            ma: MaProtocol::default(),
            data: DataProtocol::default(),
            advantage: AdvantageProtocol::default(),
            control: ControlProtocol::default(),
            stability: StabilityProtocol::default(),
            env,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        if self.policy.stages != self.env.stages() {
            return Err(Error::Config(format!(
                "policy.stages = {} but the task has {} stages",
                self.policy.stages,
                self.env.stages()
            )));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.advantage.degraded_fraction) {
            return Err(Error::Config("degraded_fraction must lie in [0, 1]".into()));
        }
        if self.ma.n_pretrain > 0 && (self.ma.finetune_steps == 0 || !(self.ma.finetune_lr > 0.0)) {
            return Err(Error::Config("ma fine-tuning needs positive finetune_steps and finetune_lr".into()));
        }
        if self.stability.n_test == 0 || self.stability.span == 0 || self.stability.variants.contains(&AdvantageVariant::None) {
            return Err(Error::Config("stability needs n_test > 0 and estimator variants only".into()));
        }
        self.sim().validate()
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            env: self.env.clone(),
            chunk_length: self.policy.k,
            ..self.sim.clone()
        }
    }

    pub fn sim_with(&self, strategy: Strategy, latency: u64) -> SimConfig {
        let base = self.sim();
        SimConfig {
            inference_latency_ticks: latency,
            smoothing: SmoothingConfig {
                strategy,
                ..base.smoothing.clone()
            },
            ..base
        }
    }

    /// Behavior cloning from the shared initialization of `seed`.
    pub fn train_bc(&self, episodes: &[Episode], weights: Option<&[f64]>, seed: u64) -> Result<PolicyNet> {
        let init = policy::init_policy(&self.policy, &mut Rng::new(seed).split_named("policy-init"))?;
        let data = BcDataset::from_episodes(episodes, &self.policy)?;
        let tc = TrainConfig {
            seed: Rng::new(seed).split_named("policy-train").seed(),
            ..self.train.clone()
        };
        Ok(policy::train(&init, &data, weights, &tc)?.net)
    }

    /// Binary-indicator sample weights from a freshly fitted estimator, one
    /// per expert-labelled step. `None` for the plain variant.
    pub fn advantage_weights(
        &self,
        variant: AdvantageVariant,
        episodes: &[Episode],
        rng: &mut Rng,
    ) -> Result<Option<Vec<f64>>> {
        let cfg = &self.advantage.estimator;
        Ok(match fit_estimator(variant, episodes, cfg, rng)? {
            None => None,
            Some(est) => {
                let ind = step_indicators(est.as_ref(), episodes, cfg)?;
                Some(indicator_weights(&ind, self.train.weight_negative))
            }
        })
    }

    /// Evaluation on the seed's shared evaluation starts.
    pub fn evaluate_policy(&self, net: &PolicyNet, sim: &SimConfig, seed: u64) -> Result<MetricsReport> {
        let mut ctl = net.clone();
        let rng = Rng::new(seed).split_named("evaluation");
        let rollouts = evaluate(sim, &mut ctl, self.eval_episodes, &rng)?;
        let metrics: Vec<_> = rollouts
            .into_iter()
            .map(|r| super::EpisodeMetrics { seed, ..r.metrics })
            .collect();
        compute_metrics(&metrics, sim.control_hz)
    }
}

/// Model-arithmetic artifacts of one seed.
#[derive(Clone, Debug)]
pub struct MaArtifacts {
    pub checkpoints: CheckpointSet,
    pub full_data: PolicyNet,
    pub in_domain_val: BcDataset,
    pub ood_val: BcDataset,
}

/// Candidate names in the model-arithmetic family beyond the four strategies.
pub const MA_BASELINES: [&str; 2] = ["single_best", "full_data"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Expert,
    HeuristicDagger,
    Degraded,
}

/// A standalone data-generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub env: EnvConfig,
    pub kind: DataKind,
    pub episodes: usize,
    pub seed: u64,
    pub expert: ExpertOptions,
    pub degrade: DegradeOptions,
    pub failure_kinds: Vec<FailureKind>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            env: p.env,
            kind: DataKind::Expert,
            episodes: 20,
            seed: 0,
            expert: p.expert,
            degrade: p.advantage.degrade,
            failure_kinds: FailureKind::ALL.to_vec(),
        }
    }
}

impl TaskSpec {
    pub fn generate(&self) -> Result<Vec<Episode>> {
        let rng = Rng::new(self.seed).split_named("gen-data");
        match self.kind {
            DataKind::Expert => generate_expert_dataset(&self.env, self.episodes, &rng, &self.expert),
            DataKind::HeuristicDagger => {
                heuristic_dagger_dataset(&self.env, self.episodes, &self.failure_kinds, &rng, &self.expert)
            }
            DataKind::Degraded => degraded_dataset(&self.env, self.episodes, &rng, &self.degrade),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataVariant {
    Base,
    HeuristicDagger,
    Dagger,
    Augmentation,
}

impl DataVariant {
    pub const ALL: [DataVariant; 4] = [
        DataVariant::Base,
        DataVariant::HeuristicDagger,
        DataVariant::Dagger,
        DataVariant::Augmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataVariant::Base => "base",
            DataVariant::HeuristicDagger => "heuristic_dagger",
            DataVariant::Dagger => "dagger",
            DataVariant::Augmentation => "augmentation",
        }
    }
}

impl std::str::FromStr for DataVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DataVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown data variant `{s}`")))
    }
}

/// Lazily built, memoized artifacts for one seed.
pub struct SeedContext<'a> {
    pub proto: &'a Protocol,
    pub seed: u64,
    root: Rng,
    ma: Option<MaArtifacts>,
    data_policies: BTreeMap<DataVariant, PolicyNet>,
    data_expert: Option<Vec<Episode>>,
    adv_data: Option<Vec<Episode>>,
    adv_policies: BTreeMap<AdvantageVariant, PolicyNet>,
    control_policy: Option<PolicyNet>,
}

impl<'a> SeedContext<'a> {
    pub fn new(proto: &'a Protocol, seed: u64) -> Self {
        Self {
            proto,
            seed,
            root: Rng::new(seed),
            ma: None,
            data_policies: BTreeMap::new(),
            data_expert: None,
            adv_data: None,
            adv_policies: BTreeMap::new(),
            control_policy: None,
        }
    }

    fn stream(&self, label: &str) -> Rng {
        self.root.split_named(label)
    }

    fn seed_for(&self, label: &str) -> u64 {
        self.stream(label).seed()
    }

    /// Mean MSTD and SFR over held-out expert episodes, per estimator.
    pub fn stability(&self) -> Result<BTreeMap<AdvantageVariant, Stability>> {
        let p = self.proto;
        let sp = &p.stability;
        let train = generate_expert_dataset(&p.env, sp.n_train, &self.stream("stab-train"), &p.expert)?;
        let test = generate_expert_dataset(&p.env, sp.n_test, &self.stream("stab-test"), &p.expert)?;
        let cfg = AdvantageConfig {
            weight_span: sp.span,
            value_horizon: sp.span,
            ..p.advantage.estimator.clone()
        };
        let mut out = BTreeMap::new();
        for &v in &sp.variants {
            let mut rng = self.stream(&format!("stab-estimator-{}", v.name()));
            let est = fit_estimator(v, &train, &cfg, &mut rng)?
                .ok_or_else(|| Error::Config("stability variants need an estimator".into()))?;
            let (mut mstd, mut sfr) = (0.0, 0.0);
            for e in &test {
                let mut e = e.clone();
                if sp.observed {
                    let mut r = self.stream("stab-observe");
                    for s in e.states.iter_mut() {
                        for x in s.iter_mut() {
                            *x += r.gaussian(p.env.obs_noise_sigma);
                        }
                    }
                }
                let st = stability_metrics(&est.series(&e)?, sp.tau)?;
                mstd += st.mstd;
                sfr += st.sfr;
            }
            let n = test.len() as f64;
            out.insert(v, Stability { mstd: mstd / n, sfr: sfr / n });
        }
        Ok(out)
    }

    pub fn ma_artifacts(&mut self) -> Result<&MaArtifacts> {
        if self.ma.is_none() {
            let p = self.proto;
            let expert = generate_expert_dataset(&p.env, p.ma.n_expert, &self.stream("ma-expert"), &p.expert)?;
            let ood = heuristic_dagger_dataset(
                &p.env,
                p.ma.n_ood,
                &FailureKind::ALL,
                &self.stream("ma-ood"),
                &p.expert,
            )?;
            let splits = build_validation_splits(&expert, &ood, &mut self.stream("ma-splits"))?;
            let subsets = partition(&splits.train, p.ma.n_subsets, &mut self.stream("ma-partition"))?;
            let init_seed = self.seed_for("ma-init");
            let (checkpoints, full_data) = if p.ma.n_pretrain == 0 {
                let tc = TrainConfig {
                    seed: self.seed_for("ma-train"),
                    ..p.train.clone()
                };
                let ck = train_checkpoints(&subsets, &p.policy, &tc, init_seed)?;
                (ck, p.train_bc(&splits.train, None, init_seed)?)
            } else {
                let pre = generate_expert_dataset(&p.env, p.ma.n_pretrain, &self.stream("ma-pretrain"), &p.expert)?;
                let base = p.train_bc(&pre, None, init_seed)?;
                let tc = TrainConfig {
                    steps: p.ma.finetune_steps,
                    lr: p.ma.finetune_lr,
                    cosine_decay_steps: p.ma.finetune_steps,
                    seed: self.seed_for("ma-train"),
                    ..p.train.clone()
                };
                let ck = fine_tune_checkpoints(&subsets, &base, &tc)?;
                let full = policy::train(
                    &base,
                    &BcDataset::from_episodes(&splits.train, &p.policy)?,
                    None,
                    &TrainConfig {
                        seed: self.seed_for("ma-train-full"),
                        ..tc
                    },
                )?
                .net;
                (ck, full)
            };
            self.ma = Some(MaArtifacts {
                checkpoints,
                full_data,
                in_domain_val: BcDataset::from_episodes(&splits.in_domain_val, &p.policy)?,
                ood_val: BcDataset::from_episodes(&splits.ood_val, &p.policy)?,
            });
        }
        Ok(self.ma.as_ref().expect("built above"))
    }

    /// Parameters for a model-arithmetic candidate: one of the four strategies
    /// or a baseline name. The report is absent for the full-data baseline.
    pub fn ma_candidate(&mut self, candidate: &str, split: ValSplit) -> Result<(ParameterVector, Option<MergeReport>)> {
        let merge_cfg = self.proto.ma.merge.clone();
        let layout = self.proto.policy.clone();
        let art = self.ma_artifacts()?;
        let val = match split {
            ValSplit::InDomain => &art.in_domain_val,
            ValSplit::Ood => &art.ood_val,
        };
        let obj = PolicyValidation { layout: &layout, data: val };
        if candidate == "full_data" {
            return Ok((art.full_data.params.clone(), None));
        }
        let strategy = if candidate == "single_best" {
            MergeStrategy::Average
        } else {
            candidate.parse()?
        };
        let (merged, report) = merge_checkpoints(
            &art.checkpoints,
            strategy,
            split,
            &obj,
            &merge_cfg,
            Some(&art.full_data.params),
        )?;
        if candidate == "single_best" {
            let i = report.baselines.single_best_index;
            return Ok((art.checkpoints.checkpoints[i].clone(), Some(report)));
        }
        Ok((merged, Some(report)))
    }

    fn data_expert(&mut self) -> Result<Vec<Episode>> {
        if self.data_expert.is_none() {
            let p = self.proto;
            self.data_expert = Some(generate_expert_dataset(
                &p.env,
                p.data.n_expert,
                &self.stream("data-expert"),
                &p.expert,
            )?);
        }
        Ok(self.data_expert.clone().expect("built above"))
    }

    pub fn data_policy(&mut self, variant: DataVariant) -> Result<PolicyNet> {
        if let Some(p) = self.data_policies.get(&variant) {
            return Ok(p.clone());
        }
        let p = self.proto;
        let expert = self.data_expert()?;
        let init_seed = self.seed_for("data-init");
        let mut episodes = expert.clone();
        match variant {
            DataVariant::Base => {}
            DataVariant::HeuristicDagger => episodes.extend(heuristic_dagger_dataset(
                &p.env,
                p.data.n_heuristic_dagger,
                &p.data.failure_kinds,
                &self.stream("data-heuristic"),
                &p.expert,
            )?),
            DataVariant::Dagger => {
                let mut base = self.data_policy(DataVariant::Base)?;
                episodes.extend(dagger_dataset(
                    &mut base,
                    &p.env,
                    p.data.n_dagger,
                    &p.data.dagger,
                    &self.stream("data-dagger"),
                )?);
            }
            DataVariant::Augmentation => {
                let mut rng = self.stream("data-augment");
                for e in &expert {
                    episodes.push(augment_mirror(e));
                    episodes.push(augment_frameskip(e, p.data.frameskip_prob, &mut rng)?);
                }
            }
        }
        let net = p.train_bc(&episodes, None, init_seed)?;
        self.data_policies.insert(variant, net.clone());
        Ok(net)
    }

    /// The mixed expert/degraded dataset of the advantage family.
    pub fn advantage_data(&mut self) -> Result<Vec<Episode>> {
        if self.adv_data.is_none() {
            let p = self.proto;
            let n_bad = (p.advantage.n_episodes as f64 * p.advantage.degraded_fraction).round() as usize;
            let n_good = p.advantage.n_episodes - n_bad;
            let mut eps = Vec::new();
            if n_good > 0 {
                eps.extend(generate_expert_dataset(&p.env, n_good, &self.stream("adv-expert"), &p.expert)?);
            }
            if n_bad > 0 {
                eps.extend(degraded_dataset(&p.env, n_bad, &self.stream("adv-degraded"), &p.advantage.degrade)?);
            }
            self.adv_data = Some(eps);
        }
        Ok(self.adv_data.clone().expect("built above"))
    }

    pub fn advantage_policy(&mut self, variant: AdvantageVariant) -> Result<PolicyNet> {
        if let Some(p) = self.adv_policies.get(&variant) {
            return Ok(p.clone());
        }
        let p = self.proto;
        let data = self.advantage_data()?;
        let mut rng = self.stream(&format!("adv-estimator-{}", variant.name()));
        let weights = p.advantage_weights(variant, &data, &mut rng)?;
        let net = p.train_bc(&data, weights.as_deref(), self.seed_for("adv-init"))?;
        self.adv_policies.insert(variant, net.clone());
        Ok(net)
    }

    pub fn advantage_sim(&self, strategy: Strategy, latency: u64) -> SimConfig {
        SimConfig {
            max_episode_ticks: self.proto.advantage.eval_horizon,
            ..self.proto.sim_with(strategy, latency)
        }
    }

    pub fn control_policy(&mut self) -> Result<PolicyNet> {
        if self.control_policy.is_none() {
            let p = self.proto;
            let eps = generate_expert_dataset(&p.env, p.control.n_expert, &self.stream("control-expert"), &p.expert)?;
            self.control_policy = Some(p.train_bc(&eps, None, self.seed_for("control-init"))?);
        }
        Ok(self.control_policy.clone().expect("built above"))
    }
}
