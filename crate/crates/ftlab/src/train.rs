//! Training protocols: pretraining on the grammar task mix, supervised
//! fine-tuning under controlled correlations, reverse fine-tuning back to
//! the pretraining task, the from-scratch baseline, capability-removal
//! fine-tuning (wrong-label training), data mixing, and jailbreak-style
//! pretraining with aliased task tokens.

use crate::data::{
    dataset_for_task, natural_dataset, tracr_counter_dataset, DataError, EncodedSample,
    FamilyChoice, PretrainStream, Provenance, TracrSample,
};
use crate::grammar::Grammar;
use crate::interp::evaluate;
use crate::model::{forward, forward_readout, load_params, Batch, ModelState, TransformerConfig};
use crate::optim::{lr_at, step, OptError, OptimizerKind, Schedule};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::task::{task_oracle, CorrelationSpec, SamplingPrior, TaskSpec};
use crate::tensor::Tensor;
use crate::vocab::{FamilyAlias, TaskFamily, Vocabulary};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Pretrain,
    Finetune,
    Reft,
    RandFt,
    Mixed,
    JailbreakPretrain,
    Scratch,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Pretrain => "pretrain",
            Protocol::Finetune => "finetune",
            Protocol::Reft => "reft",
            Protocol::RandFt => "randft",
            Protocol::Mixed => "mixed",
            Protocol::JailbreakPretrain => "jailbreak_pretrain",
            Protocol::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    NextToken,
    AnswerOnly,
}

/// Learning-rate presets for grammar-task fine-tuning. The pretraining rate
/// is 1e-3; fine-tuning presets sit one to three orders below it.
pub fn pcfg_lr_preset(name: &str) -> Option<f64> {
    match name {
        "pretrain" => Some(1e-3),
        "eta_L" => Some(1e-4),
        "eta_M" => Some(1e-5),
        "eta_S" => Some(1e-6),
        _ => None,
    }
}

/// Learning-rate presets for fine-tuning compiled models with SGD.
pub fn tracr_lr_preset(name: &str) -> Option<f64> {
    match name {
        "eta_L" => Some(1e-1),
        "eta_M" => Some(1e-2),
        "eta_S" => Some(1e-3),
        "eta_VS" => Some(1e-4),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub lr: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Linear warmup span in iterations.
    pub warmup: u64,
    pub optimizer: OptimizerKind,
    pub loss: LossMode,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_size: usize,
    /// Fraction of each batch drawn from the pretraining stream (mixed
    /// protocol only).
    pub pt_fraction: f64,
    /// Accuracy (percent) counting as capability revival.
    pub threshold: f64,
    /// Save checkpoints at these iterations (requires `out_dir`).
    pub checkpoint_iters: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(protocol: Protocol, lr: f64, iterations: u64, seed: u64) -> TrainConfig {
        let warmup = match protocol {
            // Pretraining ramps over the first 20% of training; compiled
            // models use a fixed 2K warmup (see tracr_finetune).
            Protocol::Pretrain | Protocol::JailbreakPretrain | Protocol::Scratch => {
                iterations / 5
            }
            _ => iterations / 5,
        };
        TrainConfig {
            protocol,
            lr,
            iterations,
            batch_size: 96,
            warmup,
            optimizer: OptimizerKind::AdamW,
            loss: match protocol {
                Protocol::Pretrain | Protocol::JailbreakPretrain => LossMode::NextToken,
                _ => LossMode::AnswerOnly,
            },
            seed,
            eval_every: 100,
            eval_size: 2000,
            pt_fraction: 0.0,
            threshold: 95.0,
            checkpoint_iters: Vec::new(),
            out_dir: None,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::warmup_cosine(self.lr, self.warmup, self.iterations)
    }

    fn provenance(&self) -> Provenance {
        let mut p = Provenance::new(self.protocol.name());
        p.push("lr", self.lr);
        p.push("iterations", self.iterations);
        p.push("batch_size", self.batch_size);
        p.push("warmup", self.warmup);
        p.push(
            "optimizer",
            match self.optimizer {
                OptimizerKind::AdamW => "adamw",
                OptimizerKind::SgdMomentum => "sgd_momentum",
            },
        );
        p.push(
            "loss",
            match self.loss {
                LossMode::NextToken => "next_token",
                LossMode::AnswerOnly => "answer_only",
            },
        );
        p.push("seed", self.seed);
        p.push("eval_every", self.eval_every);
        p.push("eval_size", self.eval_size);
        p.push("pt_fraction", self.pt_fraction);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    /// Pretraining-task accuracy on uncorrelated / correlated eval sets.
    pub acc_pt_c0: f64,
    pub acc_pt_c1: f64,
    /// Fine-tuning-task accuracy on uncorrelated / correlated eval sets.
    pub acc_ft_c0: f64,
    pub acc_ft_c1: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub points: Vec<EvalPoint>,
    pub provenance: Provenance,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,acc_pt_c0,acc_pt_c1,acc_ft_c0,acc_ft_c1,loss,lr\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.3e}\n",
                p.iteration, p.acc_pt_c0, p.acc_pt_c1, p.acc_ft_c0, p.acc_ft_c1, p.loss, p.lr
            ));
        }
        s
    }

    /// First recorded iteration with pretraining-task accuracy (c=0) at or
    /// above the threshold.
    pub fn threshold_iteration(&self, threshold: f64) -> Option<u64> {
        self.points
            .iter()
            .find(|p| p.acc_pt_c0 >= threshold)
            .map(|p| p.iteration)
    }

    pub fn last(&self) -> &EvalPoint {
        self.points.last().expect("run produced no eval points")
    }
}

#[derive(Debug)]
pub enum TrainError {
    Data(DataError),
    /// Loss or gradients went non-finite; carries the last healthy state.
    Diverged {
        iteration: u64,
        last_good: Box<ModelState>,
        cause: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Diverged {
                iteration, cause, ..
            } => write!(f, "training diverged at iteration {iteration}: {cause}"),
            TrainError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

// ---------------------------------------------------------------------------
// Grammar-task experiment context

/// Everything the grammar-side protocols need: the grammar, vocabulary,
/// sequence geometry, the operand pair under study and the task family.
#[derive(Debug, Clone)]
pub struct PcfgExperiment {
    pub grammar: Grammar,
    pub vocab: Vocabulary,
    pub txt_len: usize,
    pub context_len: usize,
    pub family: TaskFamily,
    pub corr: CorrelationSpec,
    /// Task families present in the pretraining mix.
    pub families: Vec<FamilyChoice>,
    pub prior: SamplingPrior,
}

pub const DESK_TXT_LEN: usize = 60;
pub const DESK_CONTEXT_LEN: usize = 72;

impl PcfgExperiment {
    /// Desk-scale default: counting task, operands a (pretraining) and b
    /// (fine-tuning) with offset one.
    pub fn desk_default(prior: SamplingPrior) -> PcfgExperiment {
        let grammar = crate::grammar::default_grammar();
        let vocab = Vocabulary::for_grammar(&grammar);
        PcfgExperiment {
            grammar,
            vocab,
            txt_len: DESK_TXT_LEN,
            context_len: DESK_CONTEXT_LEN,
            family: TaskFamily::Count,
            corr: CorrelationSpec::new(0, 1, 1, 1.0),
            families: vec![FamilyChoice::plain(TaskFamily::Count)],
            prior,
        }
    }

    pub fn with_families(mut self, families: Vec<FamilyChoice>) -> PcfgExperiment {
        self.families = families;
        self
    }

    pub fn pt_task(&self) -> TaskSpec {
        TaskSpec {
            family: self.family,
            operand: Some(self.corr.o_pt),
            operand2: self.family.default_operand2(),
            alias: FamilyAlias::Plain,
        }
    }

    pub fn ft_task(&self) -> TaskSpec {
        TaskSpec {
            family: self.family,
            operand: Some(self.corr.o_ft),
            operand2: self.family.default_operand2(),
            alias: FamilyAlias::Plain,
        }
    }

    pub fn model_config(&self, shape: &str) -> TransformerConfig {
        let vocab_size = self.vocab.size() as usize;
        match shape {
            "gpt" => TransformerConfig::gpt_shape(vocab_size, self.context_len),
            _ => TransformerConfig::tiny_shape(vocab_size, self.context_len),
        }
    }

    fn eval_seed(&self, cfg: &TrainConfig) -> u64 {
        cfg.seed ^ 0xE7A1_5EED_0000_0001
    }

    /// The four standing eval sets: PT/FT task on c=0 and c=1 texts.
    fn eval_batches(&self, cfg: &TrainConfig) -> Result<[Batch; 4], TrainError> {
        let seed = self.eval_seed(cfg);
        let mk = |task: &TaskSpec, c: f64, salt: u64| -> Result<Batch, TrainError> {
            let ds = dataset_for_task(
                &self.grammar,
                &self.vocab,
                task,
                &self.corr,
                c,
                cfg.eval_size,
                seed ^ salt,
                self.txt_len,
                self.context_len,
                "eval",
            )?;
            Ok(Batch::answer_only(&ds.samples))
        };
        Ok([
            mk(&self.pt_task(), 0.0, 1)?,
            mk(&self.pt_task(), 1.0, 2)?,
            mk(&self.ft_task(), 0.0, 3)?,
            mk(&self.ft_task(), 1.0, 4)?,
        ])
    }

    /// Fine-tuning batch sampler: fresh correlated samples each iteration,
    /// deterministic in (seed, iteration).
    fn ft_batch(&self, cfg: &TrainConfig, iteration: u64) -> Result<Batch, TrainError> {
        let ds = dataset_for_task(
            &self.grammar,
            &self.vocab,
            &self.ft_task(),
            &self.corr,
            self.corr.c_tr,
            cfg.batch_size,
            cfg.seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            self.txt_len,
            self.context_len,
            "train",
        )?;
        Ok(Batch::answer_only(&ds.samples))
    }

    /// Natural pretraining-task batch (for reverse fine-tuning and the
    /// from-scratch baseline).
    fn pt_batch(&self, cfg: &TrainConfig, iteration: u64) -> Result<Batch, TrainError> {
        let ds = natural_dataset(
            &self.grammar,
            &self.vocab,
            &self.pt_task(),
            cfg.batch_size,
            cfg.seed ^ iteration.wrapping_mul(0xD6E8_FEB8_6659_FD93),
            self.txt_len,
            self.context_len,
        )?;
        Ok(Batch::answer_only(&ds.samples))
    }

    /// Natural texts labeled with the pretraining header but the count of
    /// the fine-tuning operand as the target (capability removal).
    fn randft_batch(&self, cfg: &TrainConfig, iteration: u64) -> Result<Batch, TrainError> {
        let seed = cfg.seed ^ iteration.wrapping_mul(0xA076_1D64_78BD_642F);
        let rng = Rng::new(seed);
        let pt = self.pt_task();
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let mut srng = rng.split(i as u64);
            let txt = self
                .grammar
                .sample_string(&mut srng, self.txt_len)
                .map_err(DataError::from)?
                .tokens;
            let wrong = task_oracle(pt.family, Some(self.corr.o_ft), pt.operand2, &txt)
                .expect("counting always answers");
            samples.push(crate::data::encode_sample(
                &pt,
                &self.vocab,
                &txt,
                wrong,
                self.context_len,
                false,
            )?);
        }
        Ok(Batch::answer_only(&samples))
    }
}

// ---------------------------------------------------------------------------
// Core loop

struct LoopOutput {
    model: ModelState,
    record: RunRecord,
}

fn run_loop(
    mut model: ModelState,
    cfg: &TrainConfig,
    evals: &[Batch; 4],
    mut batch_fn: impl FnMut(u64) -> Result<Batch, TrainError>,
    provenance: Provenance,
) -> Result<LoopOutput, TrainError> {
    let schedule = cfg.schedule();
    let mut points = Vec::new();
    let mut last_loss = f64::NAN;

    let eval_point = |model: &ModelState, iter: u64, loss: f64, lr: f64| EvalPoint {
        iteration: iter,
        acc_pt_c0: evaluate(model, &evals[0]),
        acc_pt_c1: evaluate(model, &evals[1]),
        acc_ft_c0: evaluate(model, &evals[2]),
        acc_ft_c1: evaluate(model, &evals[3]),
        loss,
        lr,
    };

    for iter in 0..cfg.iterations {
        if iter % cfg.eval_every == 0 {
            points.push(eval_point(&model, iter, last_loss, lr_at(&schedule, iter)));
        }
        let batch = batch_fn(iter)?;
        let mut tape: Tape<f32> = Tape::new();
        let params = load_params(&mut tape, &model);
        // Pure answer-position batches skip the full-sequence unembedding.
        let answer_only = batch
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .count()
            == batch.n;
        let loss = if answer_only {
            let rows: Vec<u32> = batch.readout.iter().map(|&r| r as u32).collect();
            let logits = forward_readout(
                &mut tape,
                &params,
                &model.config,
                &batch.tokens,
                batch.n,
                batch.t,
                &rows,
            );
            tape.cross_entropy(logits, &batch.answers, &vec![1.0f32; batch.n])
        } else {
            let out =
                forward(&mut tape, &params, &model.config, &batch.tokens, batch.n, batch.t);
            tape.cross_entropy(out.logits, &batch.targets, &batch.weights)
        };
        let loss_val = tape.value(loss).data[0] as f64;
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged {
                iteration: iter,
                last_good: Box::new(model),
                cause: format!("loss {loss_val}"),
            });
        }
        last_loss = loss_val;
        let grads = tape.backward(loss);
        let grad_refs: Vec<Option<&Tensor<f32>>> =
            params.vars.iter().map(|&v| grads.get(v)).collect();
        let lr = lr_at(&schedule, iter);
        match step(cfg.optimizer, &mut model, &grad_refs, lr) {
            Ok(()) => {}
            Err(OptError::NanGradient { param }) => {
                return Err(TrainError::Diverged {
                    iteration: iter,
                    last_good: Box::new(model),
                    cause: format!("NaN gradient on {param}"),
                });
            }
        }
        model.iteration += 1;

        if cfg.checkpoint_iters.contains(&(iter + 1)) {
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("checkpoint_{:07}.ftck", iter + 1));
                crate::checkpoint::save_model(&path, &model)
                    .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
            }
        }
    }
    points.push(eval_point(
        &model,
        cfg.iterations,
        last_loss,
        lr_at(&schedule, cfg.iterations),
    ));
    Ok(LoopOutput {
        model,
        record: RunRecord {
            points,
            provenance,
        },
    })
}

// ---------------------------------------------------------------------------
// Protocols

/// Online next-token pretraining over the task mix.
pub fn pretrain(
    exp: &PcfgExperiment,
    model_config: TransformerConfig,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    assert!(matches!(
        cfg.protocol,
        Protocol::Pretrain | Protocol::JailbreakPretrain | Protocol::Scratch
    ));
    let model = ModelState::new_random(model_config, cfg.seed);
    let evals = exp.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("grammar_hash", format!("{:016x}", exp.grammar.content_hash()));
    provenance.push("prior", format_prior(&exp.prior));
    provenance.push("n_families", exp.families.len());

    let mut stream = PretrainStream::new(
        exp.grammar.clone(),
        exp.vocab.clone(),
        exp.families.clone(),
        exp.prior.clone(),
        cfg.seed,
        exp.txt_len,
        exp.context_len,
    );
    let batch_size = cfg.batch_size;
    let out = run_loop(
        model,
        cfg,
        &evals,
        move |_iter| {
            let samples: Vec<EncodedSample> = stream.by_ref().take(batch_size).collect();
            Ok(Batch::next_token(&samples))
        },
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Supervised fine-tuning on the single fine-tuning task with correlated
/// data at `exp.corr.c_tr`.
pub fn finetune(
    base: ModelState,
    exp: &PcfgExperiment,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let evals = exp.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("c_tr", exp.corr.c_tr);
    provenance.push("base_iteration", base.iteration);
    let exp2 = exp.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        base,
        cfg,
        &evals,
        move |iter| exp2.ft_batch(&cfg2, iter),
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Reverse fine-tuning: train back on pretraining-distribution data for
/// the pretraining task and record how quickly accuracy revives.
pub fn reverse_finetune(
    finetuned: ModelState,
    exp: &PcfgExperiment,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let evals = exp.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("threshold", cfg.threshold);
    provenance.push("base_iteration", finetuned.iteration);
    let exp2 = exp.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        finetuned,
        cfg,
        &evals,
        move |iter| exp2.pt_batch(&cfg2, iter),
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Baseline for reverse fine-tuning sample efficiency: identical schedule,
/// but initialized from a model pretrained only on the fine-tuning operand.
/// The two configs must differ in nothing but protocol tag and seed-derived
/// initialization.
pub fn scratch_ft_baseline(
    scratch_base: ModelState,
    exp: &PcfgExperiment,
    cfg: &TrainConfig,
    reft_cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let mut a = cfg.clone();
    let mut b = reft_cfg.clone();
    a.protocol = Protocol::Reft;
    a.seed = 0;
    b.protocol = Protocol::Reft;
    b.seed = 0;
    assert_eq!(a, b, "baseline must match the reverse fine-tuning schedule");
    let evals = exp.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("threshold", cfg.threshold);
    let exp2 = exp.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        scratch_base,
        cfg,
        &evals,
        move |iter| exp2.pt_batch(&cfg2, iter),
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Capability removal: train the model, on inputs carrying the pretraining
/// task header, to emit the fine-tuning operand's count instead.
pub fn rand_finetune(
    base: ModelState,
    exp: &PcfgExperiment,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let evals = exp.eval_batches(cfg)?;
    let provenance = cfg.provenance();
    let exp2 = exp.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        base,
        cfg,
        &evals,
        move |iter| exp2.randft_batch(&cfg2, iter),
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Fine-tuning with a fraction of each batch drawn from the pretraining
/// stream (next-token objective) and the rest from the fine-tuning
/// distribution (answer-only objective).
pub fn mixed_finetune(
    base: ModelState,
    exp: &PcfgExperiment,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    assert!((0.0..=1.0).contains(&cfg.pt_fraction));
    let evals = exp.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("grammar_hash", format!("{:016x}", exp.grammar.content_hash()));
    let n_pt = ((cfg.pt_fraction * cfg.batch_size as f64).round() as usize).min(cfg.batch_size);
    provenance.push("n_pt_per_batch", n_pt);

    let mut stream = PretrainStream::new(
        exp.grammar.clone(),
        exp.vocab.clone(),
        exp.families.clone(),
        exp.prior.clone(),
        cfg.seed ^ 0x5151_5151,
        exp.txt_len,
        exp.context_len,
    );
    let exp2 = exp.clone();
    let mut ft_cfg = cfg.clone();
    ft_cfg.batch_size = cfg.batch_size - n_pt;
    let out = run_loop(
        base,
        cfg,
        &evals,
        move |iter| {
            let ft = if ft_cfg.batch_size > 0 {
                Some(exp2.ft_batch(&ft_cfg, iter)?)
            } else {
                None
            };
            let pt = if n_pt > 0 {
                let samples: Vec<EncodedSample> = stream.by_ref().take(n_pt).collect();
                Some(Batch::next_token(&samples))
            } else {
                None
            };
            Ok(match (pt, ft) {
                (Some(p), Some(f)) => Batch::stack(p, f),
                (Some(p), None) => p,
                (None, Some(f)) => f,
                (None, None) => unreachable!("empty batch"),
            })
        },
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Pretraining task mix for the jailbreak protocol: the plain counting
/// token pairs with operands by prior, while each alias token pairs only
/// with the pretraining operand.
pub fn jailbreak_families(o_pt: crate::grammar::TerminalId) -> Vec<FamilyChoice> {
    vec![
        FamilyChoice::plain(TaskFamily::Count),
        FamilyChoice {
            family: TaskFamily::Count,
            alias: FamilyAlias::J1,
            fixed_operand: Some(o_pt),
        },
        FamilyChoice {
            family: TaskFamily::Count,
            alias: FamilyAlias::J2,
            fixed_operand: Some(o_pt),
        },
    ]
}

/// Accuracy of counting `operand` when the request uses the given family
/// alias token.
pub fn evaluate_alias(
    model: &ModelState,
    exp: &PcfgExperiment,
    alias: FamilyAlias,
    operand: crate::grammar::TerminalId,
    n: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let task = TaskSpec {
        family: TaskFamily::Count,
        operand: Some(operand),
        operand2: TaskFamily::Count.default_operand2(),
        alias,
    };
    let ds = natural_dataset(
        &exp.grammar,
        &exp.vocab,
        &task,
        n,
        seed,
        exp.txt_len,
        exp.context_len,
    )?;
    Ok(evaluate(model, &Batch::answer_only(&ds.samples)))
}

fn format_prior(prior: &SamplingPrior) -> String {
    prior
        .probabilities
        .iter()
        .map(|p| format!("{p}"))
        .collect::<Vec<_>>()
        .join("/")
}

// ---------------------------------------------------------------------------
// Compiled-model fine-tuning

/// Setup for fine-tuning a compiled counter: sequence length, alphabet,
/// operand pair and correlation level.
#[derive(Debug, Clone)]
pub struct TracrSetup {
    pub len: usize,
    pub alphabet: usize,
    pub corr: CorrelationSpec,
    pub c_tr: f64,
    pub bos_id: u16,
    pub readout_pos: usize,
}

impl TracrSetup {
    pub fn eval_batches(&self, cfg: &TrainConfig) -> Result<[Batch; 4], TrainError> {
        let seed = cfg.seed ^ 0x7AC4_0000_0000_0001;
        let mk = |target: u16, c: f64, salt: u64| -> Result<Batch, TrainError> {
            let samples = tracr_counter_dataset(
                self.len,
                self.alphabet,
                &self.corr,
                c,
                target,
                cfg.eval_size,
                seed ^ salt,
            )?;
            Ok(Batch::tracr(&samples, self.bos_id, self.readout_pos))
        };
        Ok([
            mk(self.corr.o_pt, 0.0, 1)?,
            mk(self.corr.o_pt, 1.0, 2)?,
            mk(self.corr.o_ft, 0.0, 3)?,
            mk(self.corr.o_ft, 1.0, 4)?,
        ])
    }

    fn train_batch(&self, cfg: &TrainConfig, iteration: u64) -> Result<Batch, TrainError> {
        let samples: Vec<TracrSample> = tracr_counter_dataset(
            self.len,
            self.alphabet,
            &self.corr,
            self.c_tr,
            self.corr.o_ft,
            cfg.batch_size,
            cfg.seed ^ iteration.wrapping_mul(0x2545_F491_4F6C_DD1D),
        )?;
        Ok(Batch::tracr(&samples, self.bos_id, self.readout_pos))
    }

    /// Pretraining-task batch (count o_pt on natural strings), used by
    /// reverse fine-tuning of compiled models and by saliency pruning.
    pub fn pt_batch(&self, batch_size: usize, seed: u64) -> Result<Batch, TrainError> {
        let samples = tracr_counter_dataset(
            self.len,
            self.alphabet,
            &self.corr,
            0.0,
            self.corr.o_pt,
            batch_size,
            seed,
        )?;
        Ok(Batch::tracr(&samples, self.bos_id, self.readout_pos))
    }
}

/// Fine-tune a (densified) compiled counter with SGD momentum, 2K warmup
/// and cosine decay to a hundredth of the peak rate.
pub fn tracr_finetune(
    base: ModelState,
    setup: &TracrSetup,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let evals = setup.eval_batches(cfg)?;
    let mut provenance = cfg.provenance();
    provenance.push("tracr_len", setup.len);
    provenance.push("tracr_alphabet", setup.alphabet);
    provenance.push("c_tr", setup.c_tr);
    let setup2 = setup.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        base,
        cfg,
        &evals,
        move |iter| setup2.train_batch(&cfg2, iter),
        provenance,
    )?;
    Ok((out.model, out.record))
}

/// Reverse fine-tuning of a compiled counter back toward the pretraining
/// operand.
pub fn tracr_reverse_finetune(
    finetuned: ModelState,
    setup: &TracrSetup,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunRecord), TrainError> {
    let evals = setup.eval_batches(cfg)?;
    let provenance = cfg.provenance();
    let setup2 = setup.clone();
    let cfg2 = cfg.clone();
    let out = run_loop(
        finetuned,
        cfg,
        &evals,
        move |iter| {
            setup2.pt_batch(
                cfg2.batch_size,
                cfg2.seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )
        },
        provenance,
    )?;
    Ok((out.model, out.record))
}
