//! In-memory stages of an experiment. Each stage takes its inputs as values
//! and derives its randomness from the master seed under a fixed name, so a
//! stage gives the same result whether it runs alone or inside a pipeline.

use super::config::ExperimentConfig;
use crate::align::{
    best_of_k_ladder, dpo_train, raft_iteration, BestOfK, DpoRun, Evaluation, Evaluator, MetricsRecord, RaftIteration,
};
use crate::ardm::{pretrain, ArdmModel, PretrainReport};
use crate::error::Result;
use crate::netcore::Rng;
use crate::prefdata::{mine_pairs, PairStore};

pub fn master(cfg: &ExperimentConfig) -> Rng {
    Rng::new(cfg.seed, 0)
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<ArdmModel> {
    ArdmModel::init(
        cfg.model.arch(),
        cfg.model.cond_dropout,
        &mut master(cfg).derive_named("init"),
    )
}

/// Restores a model from parameters saved by an earlier stage.
pub fn model_from(cfg: &ExperimentConfig, params: crate::netcore::ParamSet) -> Result<ArdmModel> {
    ArdmModel::from_params(params.thawed_copy(), cfg.model.arch(), cfg.model.cond_dropout)
}

pub fn pretrain_base(cfg: &ExperimentConfig, on_step: impl FnMut(usize, f64)) -> Result<(ArdmModel, PretrainReport)> {
    let mut model = init_model(cfg)?;
    let report = pretrain(
        &mut model,
        &cfg.process,
        &cfg.pretrain,
        &master(cfg).derive_named("pretrain"),
        on_step,
    )?;
    Ok((model, report))
}

pub fn mine(cfg: &ExperimentConfig, base: &ArdmModel) -> Result<PairStore> {
    mine_pairs(
        base,
        &cfg.reward,
        &cfg.mining,
        &cfg.sampler,
        &master(cfg).derive_named("mining"),
        cfg.model.d_c,
        &base.params.content_hash(),
        &cfg.hash(),
    )
}

/// The held-out protocol used for every reported number.
pub fn evaluator(cfg: &ExperimentConfig) -> Result<Evaluator> {
    Evaluator::new(
        cfg.reward.clone(),
        cfg.sampler.clone(),
        cfg.eval,
        cfg.model.d_c,
        &master(cfg).derive_named("eval"),
    )
}

/// The protocol that scores the DPO trajectory and picks its checkpoint.
pub fn selection_evaluator(cfg: &ExperimentConfig) -> Result<Evaluator> {
    Evaluator::new(
        cfg.reward.clone(),
        cfg.sampler.clone(),
        cfg.selection,
        cfg.model.d_c,
        &master(cfg).derive_named("selection"),
    )
}

pub fn align(
    cfg: &ExperimentConfig,
    base: &ArdmModel,
    store: &PairStore,
    on_record: impl FnMut(&MetricsRecord, &ArdmModel),
) -> Result<DpoRun> {
    dpo_train(
        base,
        None,
        store,
        &cfg.dpo,
        &selection_evaluator(cfg)?,
        &master(cfg).derive_named("dpo"),
        on_record,
    )
}

/// `cfg.raft.iterations` rounds, each sampling from the previous round's model.
pub fn raft(
    cfg: &ExperimentConfig,
    base: &ArdmModel,
    mut on_iteration: impl FnMut(usize, &RaftIteration),
) -> Result<Vec<RaftIteration>> {
    let rng = master(cfg).derive_named("raft");
    let mut out: Vec<RaftIteration> = Vec::with_capacity(cfg.raft.iterations);
    for i in 0..cfg.raft.iterations {
        let current = out.last().map_or(base, |it| &it.model);
        let it = raft_iteration(
            current,
            &cfg.reward,
            &cfg.raft.iteration,
            &cfg.sampler,
            &rng.derive(i as u64),
        )?;
        on_iteration(i + 1, &it);
        out.push(it);
    }
    Ok(out)
}

pub fn best_of_k(cfg: &ExperimentConfig, base: &ArdmModel) -> Result<Vec<BestOfK>> {
    best_of_k_ladder(base, &evaluator(cfg)?, &cfg.bok.ks)
}

pub fn evaluate(cfg: &ExperimentConfig, model: &ArdmModel, base: &ArdmModel) -> Result<Evaluation> {
    evaluator(cfg)?.evaluate(model, &base.frozen_copy())
}
