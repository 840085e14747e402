//! Experiment runner: data generation, program compilation, training
//! protocols, mechanistic analyses and report rendering.
//!
//! Every command takes `--config PATH` (sectioned key = value text), writes
//! into `--out DIR` (or the config's output dir), and stamps artifacts with
//! the resolved-config hash so reports refuse to mix runs from different
//! configurations. Exit codes: 0 success, 2 configuration error, 3 missing
//! artifact, 4 checkpoint version mismatch, 1 anything else.

use ftlab::checkpoint::{load_model, save_model};
use ftlab::compile::{compile, densify, CompiledTransformer, TRACR_READOUT};
use ftlab::config::{ExperimentConfig, SweepSpec};
use ftlab::data::{dataset_for_task, natural_dataset, Dataset};
use ftlab::dataset_io::{save_dataset, FileError};
use ftlab::grammar::{default_grammar, Grammar};
use ftlab::interp::{
    attention_dump, prediction_histogram, probe_sweep, prune_curve, Granularity,
};
use ftlab::model::{Batch, ModelState};
use ftlab::rasp::{build_counter, build_kth_largest, parse_program, RaspExpr};
use ftlab::rng::Rng;
use ftlab::report::{line_plot, series_from_csv, text_table, Series};
use ftlab::task::{CorrelationSpec, TaskSpec};
use ftlab::train::{
    self, evaluate_alias, jailbreak_families, mixed_finetune, pretrain, rand_finetune,
    reverse_finetune, scratch_ft_baseline, tracr_finetune, tracr_reverse_finetune, LossMode,
    PcfgExperiment, Protocol, TracrSetup, TrainConfig,
};
use ftlab::vocab::{FamilyAlias, TaskFamily, Vocabulary};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_VERSION: u8 = 4;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }
    fn missing(msg: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_MISSING,
            message: msg.into(),
        }
    }
    fn other(msg: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: msg.into(),
        }
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> CliError {
        let code = match e {
            FileError::VersionMismatch { .. } => EXIT_VERSION,
            FileError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError {
            code: if e.kind() == std::io::ErrorKind::NotFound {
                EXIT_MISSING
            } else {
                1
            },
            message: e.to_string(),
        }
    }
}

impl From<ftlab::train::TrainError> for CliError {
    fn from(e: ftlab::train::TrainError) -> CliError {
        CliError::other(e.to_string())
    }
}

impl From<ftlab::data::DataError> for CliError {
    fn from(e: ftlab::data::DataError) -> CliError {
        CliError::other(e.to_string())
    }
}

/// Parsed command line: subcommand, flags and positionals.
struct Args {
    command: String,
    flags: Vec<(String, String)>,
    positional: Vec<String>,
}

fn parse_args(mut argv: Vec<String>) -> Result<Args, CliError> {
    if argv.is_empty() {
        return Err(CliError::config(USAGE));
    }
    let command = argv.remove(0);
    let mut flags = Vec::new();
    let mut positional = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        if let Some(name) = arg.strip_prefix("--") {
            let boolean = matches!(name, "full" | "deterministic" | "force");
            if boolean {
                flags.push((name.to_string(), "true".to_string()));
            } else {
                i += 1;
                let value = argv
                    .get(i)
                    .ok_or_else(|| CliError::config(format!("--{name} needs a value")))?;
                flags.push((name.to_string(), value.clone()));
            }
        } else {
            positional.push(arg.clone());
        }
        i += 1;
    }
    Ok(Args {
        command,
        flags,
        positional,
    })
}

impl Args {
    fn flag(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
    fn has(&self, name: &str) -> bool {
        self.flag(name).is_some()
    }
}

const USAGE: &str = "usage: ftlab <command> [--config PATH] [--seed N] [--out DIR] [--full] [--deterministic]
commands:
  gen-data                 generate fine-tune + eval dataset files
  compile <counter|kth-largest|PATH> [--target T] [--k K] [--alphabet N] [--max-len N] [--sigma S]
                           compile a program to a checkpoint
  pretrain                 online pretraining on the task mix
  finetune --base CKPT     supervised fine-tuning (grammar or compiled model)
  reft --base CKPT         reverse fine-tuning toward the pretraining task
  randft --base CKPT       wrong-label capability-removal fine-tuning
  mixed --base CKPT        fine-tuning with a pretraining data fraction
  jailbreak                pretrain with aliased task tokens
  scratch --base CKPT      baseline: fine-tune a scratch-pretrained model toward the pretraining task
  prune --base CKPT        saliency prune curve (CSV)
  probe --base CKPT        linear probe sweep over blocks (CSV)
  attn --base CKPT         attention matrices (CSV + PGM)
  histogram --base CKPT    prediction histogram (CSV)
  report <RUN_DIR> [--force]  render SVG plots and a summary table
  sweep                    run the configured sweep grid, one process per cell";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ftlab: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match args.flag("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("config {path}: {e}")))?;
            ExperimentConfig::parse(&text).map_err(|e| CliError::config(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.flag("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| CliError::config("bad --seed value"))?;
    }
    if let Some(out) = args.flag("out") {
        cfg.out_dir = out.to_string();
    }
    if args.has("full") {
        cfg.full = true;
        // Full-scale presets: published-scale model and iteration counts.
        cfg.iterations = cfg.iterations.max(50_000);
        if cfg.shape == "tiny" {
            cfg.shape = "gpt".to_string();
        }
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Echo the resolved config and its hash next to every artifact set.
fn stamp(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::write(dir.join("config.resolved"), cfg.resolved_text())?;
    std::fs::write(dir.join("config.hash"), format!("{:016x}\n", cfg.hash()))?;
    Ok(())
}

fn grammar_from(cfg: &ExperimentConfig) -> Result<Grammar, CliError> {
    match &cfg.grammar_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("grammar {path}: {e}")))?;
            Grammar::from_dsl(&text).map_err(CliError::config)
        }
        None => Ok(default_grammar()),
    }
}

fn terminal_id(cfg: &ExperimentConfig, grammar: &Grammar, name: &str) -> Result<u16, CliError> {
    let _ = cfg;
    grammar
        .spec()
        .terminal_names
        .iter()
        .position(|n| n == name)
        .map(|i| i as u16)
        .ok_or_else(|| CliError::config(format!("unknown terminal '{name}'")))
}

fn experiment_from(cfg: &ExperimentConfig) -> Result<PcfgExperiment, CliError> {
    let grammar = grammar_from(cfg)?;
    let o_pt = terminal_id(cfg, &grammar, &cfg.o_pt)?;
    let o_ft = terminal_id(cfg, &grammar, &cfg.o_ft)?;
    let vocab = Vocabulary::for_grammar(&grammar);
    let families = cfg
        .families
        .iter()
        .map(|code| {
            TaskFamily::from_code(code)
                .map(ftlab::data::FamilyChoice::plain)
                .ok_or_else(|| CliError::config(format!("unknown family '{code}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PcfgExperiment {
        grammar,
        vocab,
        txt_len: cfg.txt_len,
        context_len: cfg.context_len,
        family: cfg.family,
        corr: CorrelationSpec::new(o_pt, o_ft, cfg.offset_q, cfg.c_tr),
        families,
        prior: cfg.resolved_prior(),
    })
}

fn train_config_from(cfg: &ExperimentConfig, protocol: Protocol) -> TrainConfig {
    let mut tc = TrainConfig::new(protocol, cfg.resolved_lr(), cfg.iterations, cfg.seed);
    tc.batch_size = cfg.batch_size;
    tc.eval_every = cfg.eval_every;
    tc.eval_size = cfg.eval_size;
    tc.pt_fraction = cfg.pt_fraction;
    tc.threshold = cfg.threshold;
    if cfg.shape == "tracr" {
        tc.optimizer = ftlab::optim::OptimizerKind::SgdMomentum;
        tc.warmup = 2000.min(cfg.iterations / 2);
    }
    if matches!(protocol, Protocol::Pretrain | Protocol::JailbreakPretrain) {
        tc.loss = LossMode::NextToken;
        tc.checkpoint_iters = [10_000u64, 50_000, 100_000, 200_000]
            .iter()
            .copied()
            .filter(|&i| i <= cfg.iterations)
            .collect();
    }
    tc
}

fn save_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    name: &str,
    model: Option<&ModelState>,
    record: &train::RunRecord,
) -> Result<(), CliError> {
    stamp(dir, cfg)?;
    if let Some(m) = model {
        save_model(&dir.join(format!("{name}.ftck")), m)?;
    }
    std::fs::write(dir.join(format!("{name}.csv")), record.to_csv())?;
    let mut sidecar = record.provenance.clone();
    sidecar.push("config_hash", format!("{:016x}", cfg.hash()));
    std::fs::write(
        dir.join(format!("{name}.provenance")),
        sidecar.canonical_text(),
    )?;
    let last = record.last();
    println!(
        "{name}: final acc_pt_c0 {:.2} acc_pt_c1 {:.2} acc_ft_c0 {:.2} acc_ft_c1 {:.2}",
        last.acc_pt_c0, last.acc_pt_c1, last.acc_ft_c0, last.acc_ft_c1
    );
    Ok(())
}

fn load_base(args: &Args) -> Result<ModelState, CliError> {
    let path = args
        .flag("base")
        .ok_or_else(|| CliError::config("--base CKPT is required"))?;
    Ok(load_model(Path::new(path))?)
}

/// Compiled-model fine-tuning setup from the config.
fn tracr_setup_from(cfg: &ExperimentConfig) -> TracrSetup {
    TracrSetup {
        len: cfg.tracr_len,
        alphabet: ftlab::data::COUNTER_ALPHABET,
        corr: CorrelationSpec::new(0, 1, cfg.offset_q, cfg.c_tr),
        c_tr: cfg.c_tr,
        bos_id: ftlab::data::COUNTER_ALPHABET as u16,
        readout_pos: TRACR_READOUT,
    }
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let args = parse_args(argv)?;
    match args.command.as_str() {
        "gen-data" => cmd_gen_data(&args),
        "compile" => cmd_compile(&args),
        "pretrain" => cmd_pretrain(&args, false),
        "jailbreak" => cmd_pretrain(&args, true),
        "finetune" => cmd_finetune(&args),
        "reft" => cmd_reft(&args),
        "randft" => cmd_randft(&args),
        "mixed" => cmd_mixed(&args),
        "scratch" => cmd_scratch(&args),
        "prune" => cmd_prune(&args),
        "probe" => cmd_probe(&args),
        "attn" => cmd_attn(&args),
        "histogram" => cmd_histogram(&args),
        "report" => cmd_report(&args),
        "sweep" => cmd_sweep(&args),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::config(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn cmd_gen_data(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let exp = experiment_from(&cfg)?;
    let names = exp.grammar.spec().terminal_names.clone();
    let n = 10_000.min(cfg.eval_size.max(1000) * 5);

    let write = |name: &str, ds: &Dataset| -> Result<(), CliError> {
        save_dataset(&dir.join(name), ds, &names)?;
        println!(
            "{name}: {} samples, correlated fraction {:.4}, provenance {:016x}",
            ds.samples.len(),
            ds.correlated_fraction(),
            ds.provenance.hash()
        );
        Ok(())
    };
    let train = dataset_for_task(
        &exp.grammar,
        &exp.vocab,
        &exp.ft_task(),
        &exp.corr,
        exp.corr.c_tr,
        n,
        cfg.seed,
        exp.txt_len,
        exp.context_len,
        "finetune",
    )?;
    write("finetune.ftds", &train)?;
    let (c0, c1) = ftlab::data::eval_sets(
        &exp.grammar,
        &exp.vocab,
        &exp.ft_task(),
        &exp.corr,
        cfg.eval_size,
        cfg.seed ^ 1,
        exp.txt_len,
        exp.context_len,
    )?;
    write("eval_c0.ftds", &c0)?;
    write("eval_c1.ftds", &c1)?;
    Ok(())
}

fn cmd_compile(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let program = args
        .positional
        .first()
        .ok_or_else(|| CliError::config("compile needs a program (counter | kth-largest | PATH)"))?;
    let (expr, alphabet, max_len): (RaspExpr, usize, usize) = match program.as_str() {
        "counter" => {
            let target = args
                .flag("target")
                .map(|t| letter_id(t))
                .transpose()?
                .unwrap_or(0);
            let alphabet: usize = args
                .flag("alphabet")
                .map(|v| v.parse().map_err(|_| CliError::config("bad --alphabet")))
                .transpose()?
                .unwrap_or(ftlab::data::COUNTER_ALPHABET);
            let max_len: usize = args
                .flag("max-len")
                .map(|v| v.parse().map_err(|_| CliError::config("bad --max-len")))
                .transpose()?
                .unwrap_or(cfg.tracr_len);
            (build_counter(target), alphabet, max_len)
        }
        "kth-largest" => {
            let k: usize = args
                .flag("k")
                .map(|v| v.parse().map_err(|_| CliError::config("bad --k")))
                .transpose()?
                .unwrap_or(5);
            let alphabet = ftlab::data::MAX_ELEMENT_ALPHABET;
            (build_kth_largest(k), alphabet, alphabet)
        }
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("program {path}: {e}")))?;
            let expr = parse_program(&text).map_err(|e| CliError::config(e.to_string()))?;
            let alphabet: usize = args
                .flag("alphabet")
                .map(|v| v.parse().map_err(|_| CliError::config("bad --alphabet")))
                .transpose()?
                .unwrap_or(ftlab::data::COUNTER_ALPHABET);
            let max_len: usize = args
                .flag("max-len")
                .map(|v| v.parse().map_err(|_| CliError::config("bad --max-len")))
                .transpose()?
                .unwrap_or(cfg.tracr_len);
            (expr, alphabet, max_len)
        }
    };
    let compiled: CompiledTransformer =
        compile(&expr, alphabet, max_len).map_err(|e| CliError::config(e.to_string()))?;
    save_model(&dir.join("compiled.ftck"), &compiled.model)?;
    let sigma: f64 = args
        .flag("sigma")
        .map(|v| v.parse().map_err(|_| CliError::config("bad --sigma")))
        .transpose()?
        .unwrap_or(cfg.tracr_sigma);
    let dense = densify(&compiled, sigma, &mut Rng::new(cfg.seed ^ 0xD15E));
    save_model(&dir.join("densified.ftck"), &dense)?;
    println!(
        "compiled {} (alphabet {alphabet}, max_len {max_len}, d_model {}), wrote compiled.ftck and densified.ftck (sigma {sigma})",
        program, compiled.model.config.d_model
    );
    Ok(())
}

fn letter_id(s: &str) -> Result<u16, CliError> {
    let c = s
        .chars()
        .next()
        .ok_or_else(|| CliError::config("empty --target"))?;
    if !c.is_ascii_lowercase() {
        return Err(CliError::config("targets are lowercase letters"));
    }
    Ok((c as u8 - b'a') as u16)
}

fn cmd_pretrain(args: &Args, jailbreak: bool) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let mut exp = experiment_from(&cfg)?;
    let protocol = if jailbreak {
        Protocol::JailbreakPretrain
    } else {
        Protocol::Pretrain
    };
    if jailbreak {
        exp.families = jailbreak_families(exp.corr.o_pt);
    }
    let mut tc = train_config_from(&cfg, protocol);
    tc.out_dir = Some(dir.clone());
    let model_cfg = exp.model_config(&cfg.shape);
    let (model, record) = pretrain(&exp, model_cfg, &tc)?;
    save_run(&dir, &cfg, protocol.name(), Some(&model), &record)?;
    if jailbreak {
        for alias in [FamilyAlias::Plain, FamilyAlias::J1, FamilyAlias::J2] {
            let acc = evaluate_alias(&model, &exp, alias, exp.corr.o_pt, cfg.eval_size, cfg.seed ^ 7)?;
            println!("count-{} via {}: {acc:.2}", cfg.o_pt, alias.code());
        }
    }
    Ok(())
}

fn cmd_finetune(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let base = load_base(args)?;
    let tc = train_config_from(&cfg, Protocol::Finetune);
    if cfg.shape == "tracr" {
        let setup = tracr_setup_from(&cfg);
        let (model, record) = tracr_finetune(base, &setup, &tc)?;
        save_run(&dir, &cfg, "finetune", Some(&model), &record)?;
    } else {
        let exp = experiment_from(&cfg)?;
        let (model, record) = train::finetune(base, &exp, &tc)?;
        save_run(&dir, &cfg, "finetune", Some(&model), &record)?;
    }
    Ok(())
}

fn cmd_reft(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let base = load_base(args)?;
    let tc = train_config_from(&cfg, Protocol::Reft);
    let (model, record) = if cfg.shape == "tracr" {
        let setup = tracr_setup_from(&cfg);
        tracr_reverse_finetune(base, &setup, &tc)?
    } else {
        let exp = experiment_from(&cfg)?;
        reverse_finetune(base, &exp, &tc)?
    };
    save_run(&dir, &cfg, "reft", Some(&model), &record)?;
    match record.threshold_iteration(tc.threshold) {
        Some(iter) => println!("revival threshold {:.1}% reached at iteration {iter}", tc.threshold),
        None => println!("revival threshold {:.1}% not reached", tc.threshold),
    }
    Ok(())
}

fn cmd_randft(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let base = load_base(args)?;
    let exp = experiment_from(&cfg)?;
    let tc = train_config_from(&cfg, Protocol::RandFt);
    let (model, record) = rand_finetune(base, &exp, &tc)?;
    save_run(&dir, &cfg, "randft", Some(&model), &record)
}

fn cmd_mixed(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let base = load_base(args)?;
    let exp = experiment_from(&cfg)?;
    let tc = train_config_from(&cfg, Protocol::Mixed);
    let (model, record) = mixed_finetune(base, &exp, &tc)?;
    save_run(&dir, &cfg, "mixed", Some(&model), &record)
}

fn cmd_scratch(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    let base = load_base(args)?;
    let exp = experiment_from(&cfg)?;
    let tc = train_config_from(&cfg, Protocol::Scratch);
    let reft_cfg = {
        let mut c = tc.clone();
        c.protocol = Protocol::Scratch;
        c
    };
    let (model, record) = scratch_ft_baseline(base, &exp, &tc, &reft_cfg)?;
    save_run(&dir, &cfg, "scratch", Some(&model), &record)?;
    match record.threshold_iteration(tc.threshold) {
        Some(iter) => println!("baseline threshold reached at iteration {iter}"),
        None => println!("baseline threshold not reached"),
    }
    Ok(())
}

fn analysis_batches(
    cfg: &ExperimentConfig,
    model: &ModelState,
) -> Result<(Batch, Batch, Batch), CliError> {
    // (prune-gradient data labeled for the pretraining task, PT eval, FT eval)
    if cfg.shape == "tracr" {
        let setup = tracr_setup_from(cfg);
        let prune = setup.pt_batch(512, cfg.seed ^ 0x9A11)?;
        let evals = setup.eval_batches(&train_config_from(cfg, Protocol::Finetune))?;
        let [pt_c0, _, ft_c0, _] = evals;
        let _ = model;
        Ok((prune, pt_c0, ft_c0))
    } else {
        let exp = experiment_from(cfg)?;
        let prune_ds = natural_dataset(
            &exp.grammar,
            &exp.vocab,
            &exp.pt_task(),
            512,
            cfg.seed ^ 0x9A11,
            exp.txt_len,
            exp.context_len,
        )?;
        let tc = train_config_from(cfg, Protocol::Finetune);
        let mk = |task: &TaskSpec, c: f64, salt: u64| -> Result<Batch, CliError> {
            let ds = dataset_for_task(
                &exp.grammar,
                &exp.vocab,
                task,
                &exp.corr,
                c,
                cfg.analysis_eval_n,
                tc.seed ^ salt,
                exp.txt_len,
                exp.context_len,
                "analysis",
            )?;
            Ok(Batch::answer_only(&ds.samples))
        };
        Ok((
            Batch::answer_only(&prune_ds.samples),
            mk(&exp.pt_task(), 0.0, 21)?,
            mk(&exp.ft_task(), 0.0, 23)?,
        ))
    }
}

fn cmd_prune(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let model = load_base(args)?;
    let granularity = match cfg.granularity.as_str() {
        "weight" => Granularity::Weight,
        _ => Granularity::Neuron,
    };
    let (prune_data, pt_eval, ft_eval) = analysis_batches(&cfg, &model)?;
    let curve = prune_curve(&model, &prune_data, &cfg.prune_ks, granularity, &pt_eval, &ft_eval);
    let mut csv = String::from("k,acc_pt,acc_ft\n");
    for (k, pt, ft) in &curve {
        csv.push_str(&format!("{k},{pt:.4},{ft:.4}\n"));
        println!("K={k}: acc_pt {pt:.2} acc_ft {ft:.2}");
    }
    std::fs::write(dir.join("prune_curve.csv"), csv)?;
    Ok(())
}

fn cmd_probe(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let model = load_base(args)?;
    let exp = experiment_from(&cfg)?;
    let ds = natural_dataset(
        &exp.grammar,
        &exp.vocab,
        &exp.pt_task(),
        cfg.probe_samples,
        cfg.seed ^ 0x9B0B,
        exp.txt_len,
        exp.context_len,
    )?;
    let batch = Batch::answer_only(&ds.samples);
    let labels: Vec<u32> = batch.answers.clone();
    let report = probe_sweep(&model, &batch, &labels, cfg.seed);
    let mut csv = String::from("block,probe_acc,chance\n");
    for (b, acc) in report.block_accuracies.iter().enumerate() {
        csv.push_str(&format!("{},{acc:.4},{:.4}\n", b + 1, report.chance));
        println!("block {}: probe accuracy {acc:.2} (chance {:.2})", b + 1, report.chance);
    }
    std::fs::write(dir.join("probe_sweep.csv"), csv)?;
    Ok(())
}

fn cmd_attn(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let model = load_base(args)?;
    let (tokens, labels) = if cfg.shape == "tracr" {
        let setup = tracr_setup_from(&cfg);
        let mut rng = Rng::new(cfg.seed ^ 0xA77);
        let input = ftlab::data::tracr_input(ftlab::data::TracrTask::Counter, setup.len, &mut rng)?;
        let mut tokens = vec![setup.bos_id];
        tokens.extend(&input);
        let mut labels = vec!["$".to_string()];
        labels.extend(
            input
                .iter()
                .map(|&t| ((b'a' + t as u8) as char).to_string()),
        );
        (tokens, labels)
    } else {
        let exp = experiment_from(&cfg)?;
        let ds = natural_dataset(
            &exp.grammar,
            &exp.vocab,
            &exp.pt_task(),
            1,
            cfg.seed ^ 0xA77,
            exp.txt_len,
            exp.context_len,
        )?;
        let tokens = ds.samples[0].token_ids.clone();
        let labels = tokens.iter().map(|&t| exp.vocab.display(t)).collect();
        (tokens, labels)
    };
    let dump = attention_dump(&model, &tokens, labels);
    for block in 0..dump.n_blocks {
        for head in 0..dump.n_heads {
            std::fs::write(
                dir.join(format!("attn_b{block}_h{head}.csv")),
                dump.to_csv(block, head),
            )?;
            std::fs::write(
                dir.join(format!("attn_b{block}_h{head}.pgm")),
                dump.to_pgm(block, head),
            )?;
        }
    }
    println!(
        "wrote {} attention matrices to {}",
        dump.n_blocks * dump.n_heads,
        dir.display()
    );
    Ok(())
}

fn cmd_histogram(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let model = load_base(args)?;
    let (_, pt_eval, _) = analysis_batches(&cfg, &model)?;
    let hist = prediction_histogram(&model, &pt_eval);
    let mut csv = String::from("class,count\n");
    for (class, count) in &hist {
        csv.push_str(&format!("{class},{count}\n"));
    }
    std::fs::write(dir.join("prediction_histogram.csv"), csv)?;
    println!(
        "{} distinct predicted classes over {} samples",
        hist.len(),
        pt_eval.n
    );
    Ok(())
}

fn cmd_report(args: &Args) -> Result<(), CliError> {
    let run_dir = PathBuf::from(
        args.positional
            .first()
            .map(String::as_str)
            .or(args.flag("out"))
            .ok_or_else(|| CliError::config("report needs a run directory"))?,
    );
    if !run_dir.exists() {
        return Err(CliError::missing(format!("{} does not exist", run_dir.display())));
    }
    // Collect CSVs, verifying they share one config hash.
    let mut hashes: Vec<String> = Vec::new();
    let mut run_csvs: Vec<(String, String)> = Vec::new();
    let mut summary_rows: Vec<Vec<String>> = Vec::new();
    for entry in walk_files(&run_dir)? {
        match entry.file_name().and_then(|n| n.to_str()) {
            Some("config.hash") => {
                hashes.push(std::fs::read_to_string(&entry)?.trim().to_string());
            }
            Some(name) if name.ends_with(".csv") => {
                let text = std::fs::read_to_string(&entry)?;
                run_csvs.push((entry.display().to_string(), text));
                let _ = name;
            }
            _ => {}
        }
    }
    hashes.sort();
    hashes.dedup();
    if hashes.len() > 1 && !args.has("force") {
        return Err(CliError::config(format!(
            "run directory mixes {} different config hashes; pass --force to combine",
            hashes.len()
        )));
    }
    if run_csvs.is_empty() {
        return Err(CliError::missing("no CSV artifacts found"));
    }
    for (path, text) in &run_csvs {
        let stem = Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string();
        let series: Vec<Series> = if text.starts_with("iteration,") {
            series_from_csv(text, &["acc_pt_c0", "acc_pt_c1", "acc_ft_c0", "acc_ft_c1"])
        } else if text.starts_with("k,") {
            series_from_csv(text, &["acc_pt", "acc_ft"])
        } else if text.starts_with("block,") {
            series_from_csv(text, &["probe_acc", "chance"])
        } else {
            continue;
        };
        let svg = line_plot(&stem, x_label_for(text), "accuracy (%)", &series);
        let svg_path = Path::new(path).with_extension("svg");
        std::fs::write(&svg_path, svg)?;
        // Summary row: last value of each series.
        let mut row = vec![stem];
        for s in &series {
            if let Some((_, y)) = s.points.last() {
                row.push(format!("{y:.2}"));
            }
        }
        summary_rows.push(row);
    }
    let table = text_table(&["artifact", "final values..."], &summary_rows);
    std::fs::write(run_dir.join("summary.txt"), &table)?;
    println!("{table}");
    Ok(())
}

fn x_label_for(text: &str) -> &'static str {
    if text.starts_with("iteration,") {
        "iteration"
    } else if text.starts_with("k,") {
        "units pruned"
    } else {
        "block"
    }
}

fn walk_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_sweep(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg)?;
    stamp(&dir, &cfg)?;
    let cells = SweepSpec::from_config(&cfg)
        .cells()
        .map_err(|e| CliError::config(e.to_string()))?;
    let workers: usize = std::env::var("FTLAB_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1);
    println!("sweep: {} cells, {} worker(s)", cells.len(), workers);
    let exe = std::env::current_exe()?;

    let mut pending: std::collections::VecDeque<_> = cells.iter().collect();
    let mut running: Vec<(String, std::process::Child)> = Vec::new();
    let mut failures = 0usize;
    loop {
        while running.len() < workers {
            let Some(cell) = pending.pop_front() else { break };
            let cell_dir = dir.join(cell.name());
            std::fs::create_dir_all(&cell_dir)?;
            // Write the per-cell config.
            let mut cc = cfg.clone();
            cc.prior_preset = cell.prior.clone();
            cc.prior_values = None;
            cc.lr = None;
            cc.lr_preset = Some(cell.lr.clone());
            cc.c_tr = cell.c_tr;
            cc.seed = cell.seed;
            cc.out_dir = cell_dir.display().to_string();
            let cfg_path = cell_dir.join("cell.config");
            std::fs::write(&cfg_path, cc.resolved_text())?;
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg(&cell.protocol).arg("--config").arg(&cfg_path);
            if let Some(base) = args.flag("base") {
                cmd.arg("--base").arg(base);
            }
            let child = cmd
                .stdout(std::process::Stdio::inherit())
                .stderr(std::process::Stdio::inherit())
                .spawn()?;
            println!("cell {} started", cell.name());
            running.push((cell.name(), child));
        }
        if running.is_empty() {
            break;
        }
        // Reap one.
        let (name, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            eprintln!("cell {name} failed with {status}");
            failures += 1;
        } else {
            println!("cell {name} finished");
        }
    }
    if failures > 0 {
        return Err(CliError::other(format!("{failures} sweep cell(s) failed")));
    }
    Ok(())
}
