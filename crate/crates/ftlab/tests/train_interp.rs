//! Trainer/analysis integration: determinism of run records, prune curve
//! behavior on compiled models, alias evaluation plumbing, and the
//! learning-rate trace invariant.

use ftlab::compile::{compile, densify};
use ftlab::interp::{evaluate, evaluate_naive, prune_curve, Granularity};
use ftlab::model::{Batch, ModelState};
use ftlab::optim::{lr_at, OptimizerKind};
use ftlab::rasp::build_counter;
use ftlab::rng::Rng;
use ftlab::task::{CorrelationSpec, SamplingPrior};
use ftlab::train::{
    evaluate_alias, jailbreak_families, pretrain, PcfgExperiment, Protocol, TracrSetup,
    TrainConfig,
};
use ftlab::vocab::FamilyAlias;

fn tracr_setup() -> (ModelState, TracrSetup) {
    let compiled = compile(&build_counter(0), 9, 20).unwrap();
    let model = densify(&compiled, 0.001, &mut Rng::new(11));
    (
        model,
        TracrSetup {
            len: 20,
            alphabet: 9,
            corr: CorrelationSpec::new(0, 1, 1, 1.0),
            c_tr: 1.0,
            bos_id: 9,
            readout_pos: ftlab::compile::TRACR_READOUT,
        },
    )
}

#[test]
fn compiled_model_evaluates_at_hundred_and_matches_naive() {
    let (model, setup) = tracr_setup();
    let cfg = TrainConfig::new(Protocol::Finetune, 0.0, 0, 5);
    let evals = setup.eval_batches(&cfg).unwrap();
    // Subsample for the naive cross-check; full set for the accuracy claim.
    let acc = evaluate(&model, &evals[0]);
    assert_eq!(acc, 100.0, "densified counter must stay exact");
    let small = Batch {
        tokens: evals[0].tokens[..20 * 21].to_vec(),
        n: 20,
        t: 21,
        targets: evals[0].targets[..20 * 21].to_vec(),
        weights: evals[0].weights[..20 * 21].to_vec(),
        readout: evals[0].readout[..20].to_vec(),
        answers: evals[0].answers[..20].to_vec(),
    };
    assert_eq!(evaluate(&model, &small), evaluate_naive(&model, &small));
}

#[test]
fn prune_curve_k0_equals_unpruned_and_is_reproducible() {
    let (model, setup) = tracr_setup();
    let cfg = TrainConfig::new(Protocol::Finetune, 0.0, 0, 6);
    let evals = setup.eval_batches(&cfg).unwrap();
    let prune_data = setup.pt_batch(128, 1234).unwrap();
    let ks = [0usize, 1, 2];
    let c1 = prune_curve(&model, &prune_data, &ks, Granularity::Weight, &evals[0], &evals[2]);
    let c2 = prune_curve(&model, &prune_data, &ks, Granularity::Weight, &evals[0], &evals[2]);
    assert_eq!(c1, c2, "prune curve must be deterministic");
    assert_eq!(c1[0].0, 0);
    assert_eq!(c1[0].1, evaluate(&model, &evals[0]));
    assert_eq!(c1[0].2, evaluate(&model, &evals[2]));
}

#[test]
fn lr_trace_matches_schedule_exactly() {
    // The recorded lr at every eval point equals lr_at(schedule, iter).
    let exp = {
        let mut e = PcfgExperiment::desk_default(SamplingPrior::high());
        e.txt_len = 44;
        e.context_len = 56;
        e
    };
    let mut cfg = TrainConfig::new(Protocol::Finetune, 1e-4, 6, 3);
    cfg.batch_size = 4;
    cfg.eval_every = 2;
    cfg.eval_size = 8;
    let base = ModelState::new_random(exp.model_config("tiny"), 1);
    let (_, record) = ftlab::train::finetune(base, &exp, &cfg).unwrap();
    let schedule = cfg.schedule();
    for p in &record.points {
        assert_eq!(p.lr, lr_at(&schedule, p.iteration));
    }
}

#[test]
fn jailbreak_pretrain_mix_and_alias_eval_plumbing() {
    // Alias-free symmetry: an untrained model shows no alias gap beyond
    // noise, and the alias evaluation runs on all three task tokens.
    let exp = {
        let mut e = PcfgExperiment::desk_default(SamplingPrior::high());
        e.txt_len = 44;
        e.context_len = 56;
        e.families = jailbreak_families(0);
        e
    };
    let model = ModelState::new_random(exp.model_config("tiny"), 2);
    for alias in [FamilyAlias::Plain, FamilyAlias::J1, FamilyAlias::J2] {
        let acc = evaluate_alias(&model, &exp, alias, 0, 60, 99).unwrap();
        assert!(acc < 30.0, "untrained alias accuracy {acc}");
    }
}

#[test]
fn pretrain_zero_iterations_yields_chance_level_and_determinism() {
    let exp = {
        let mut e = PcfgExperiment::desk_default(SamplingPrior::high());
        e.txt_len = 44;
        e.context_len = 56;
        e
    };
    let mut cfg = TrainConfig::new(Protocol::Pretrain, 1e-3, 2, 7);
    cfg.batch_size = 4;
    cfg.eval_every = 1;
    cfg.eval_size = 16;
    cfg.optimizer = OptimizerKind::AdamW;
    let (m1, r1) = pretrain(&exp, exp.model_config("tiny"), &cfg).unwrap();
    let (m2, r2) = pretrain(&exp, exp.model_config("tiny"), &cfg).unwrap();
    assert_eq!(m1.param_hash(), m2.param_hash(), "pretraining must be deterministic");
    assert_eq!(r1.to_csv(), r2.to_csv());
}
