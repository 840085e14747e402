//! Acceptance suite: one pass/fail line per criterion.
//!
//! Fast criteria (1, 5, 8, 9) run by default. The training-heavy criteria
//! (2, 3+4 on compiled models; 6+7 on grammar models) are `#[ignore]`d as
//! the slow suite; run them with
//! `cargo test -p ftlab --release --test acceptance -- --ignored --test-threads=1 --nocapture`.

use ftlab::compile::{compile, densify, CompiledTransformer};
use ftlab::data::{dataset_for_task, decode_sample, natural_dataset, FamilyChoice, PretrainStream};
use ftlab::grammar::default_grammar;
use ftlab::interp::{
    evaluate, prediction_histogram, probe_sweep, prune_curve, saliency_prune, Granularity,
};
use ftlab::model::{forward, load_param_tensors, Batch, ModelState, TransformerConfig};
use ftlab::optim::OptimizerKind;
use ftlab::rasp::{build_counter, build_kth_largest, program_answer, RaspExpr};
use ftlab::rng::Rng;
use ftlab::task::{CorrelationSpec, SamplingPrior, TaskSpec};
use ftlab::tape::Tape;
use ftlab::tensor::Tensor;
use ftlab::train::{
    finetune, pretrain, reverse_finetune, scratch_ft_baseline, rand_finetune, tracr_finetune,
    PcfgExperiment, Protocol, TracrSetup, TrainConfig,
};
use ftlab::vocab::TaskFamily;
use std::time::Instant;

fn verdict(name: &str, pass: bool, detail: String) -> bool {
    println!(
        "ACCEPTANCE {}: {} ({detail})",
        name,
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn exhaustive_inputs(alphabet: u16, len: usize) -> Vec<Vec<u16>> {
    let total = (alphabet as usize).pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let t = (code % alphabet as usize) as u16;
                    code /= alphabet as usize;
                    t
                })
                .collect()
        })
        .collect()
}

fn exact_match_count(
    compiled: &CompiledTransformer,
    expr: &RaspExpr,
    inputs: &[Vec<u16>],
    alphabet: usize,
) -> usize {
    let preds = compiled.answers(inputs);
    inputs
        .iter()
        .zip(&preds)
        .filter(|(input, &pred)| pred == program_answer(expr, input, alphabet).unwrap())
        .count()
}

#[test]
fn criterion_1_compiler_exactness() {
    let t0 = Instant::now();
    let mut mismatches = 0usize;
    let mut total = 0usize;

    // (a) Exhaustive inputs of length 2..=6 over a 3-letter alphabet. The
    // answer position is program index 1, so length-1 inputs are outside
    // both the interpreter's and the compiled model's domain.
    let counter = build_counter(0);
    let counter_small = compile(&counter, 3, 6).unwrap();
    let kth = build_kth_largest(2);
    let kth_small = compile(&kth, 3, 6).unwrap();
    for len in 2..=6 {
        let inputs = exhaustive_inputs(3, len);
        total += 2 * inputs.len();
        mismatches += inputs.len() - exact_match_count(&counter_small, &counter, &inputs, 3);
        mismatches += inputs.len() - exact_match_count(&kth_small, &kth, &inputs, 3);
    }

    // (b) 10,000 random full-length inputs per model.
    let counter_full = compile(&counter, 9, 20).unwrap();
    let mut rng = Rng::new(1);
    let inputs: Vec<Vec<u16>> = (0..10_000)
        .map(|_| ftlab::data::tracr_input(ftlab::data::TracrTask::Counter, 20, &mut rng).unwrap())
        .collect();
    total += inputs.len();
    mismatches += inputs.len() - exact_match_count(&counter_full, &counter, &inputs, 9);

    let kth5 = build_kth_largest(5);
    let kth_full = compile(&kth5, 26, 26).unwrap();
    let inputs: Vec<Vec<u16>> = (0..10_000)
        .map(|_| ftlab::data::tracr_input(ftlab::data::TracrTask::MaxElement, 26, &mut rng).unwrap())
        .collect();
    total += inputs.len();
    mismatches += inputs.len() - exact_match_count(&kth_full, &kth5, &inputs, 26);

    // Published exemplars: counting 'b' gives 10; the fifth-largest of the
    // ten-letter sample is 'h'.
    let fig_counter = compile(&build_counter(1), 10, 48).unwrap();
    let s = "cadabcbadfbgcebbahjibdefihfegabgfhjcbeddhjibab";
    let input: Vec<u16> = s.chars().map(|c| (c as u8 - b'a') as u16).collect();
    let count_b_ok = fig_counter.answers(&[input])[0] == 10;
    let sample: Vec<u16> = "bdafhmxpqn".chars().map(|c| (c as u8 - b'a') as u16).collect();
    let kth_ok = kth_full.answers(&[sample])[0] == (b'h' - b'a') as u16;

    let pass = mismatches == 0 && count_b_ok && kth_ok;
    assert!(verdict(
        "1 compiler exactness",
        pass,
        format!(
            "{mismatches} mismatches over {total} inputs, exemplar answers {}/{}; {:.1}s",
            count_b_ok as u8,
            kth_ok as u8,
            t0.elapsed().as_secs_f64()
        )
    ));
    assert!(t0.elapsed().as_secs_f64() < 120.0, "criterion 1 runtime bound");
}

fn desk_counter_setup(c_tr: f64) -> (ModelState, TracrSetup) {
    let compiled = compile(&build_counter(0), 9, 20).unwrap();
    let model = densify(&compiled, 0.001, &mut Rng::new(11));
    (
        model,
        TracrSetup {
            len: 20,
            alphabet: 9,
            corr: CorrelationSpec::new(0, 1, 1, 1.0),
            c_tr,
            bos_id: compiled.bos_id,
            readout_pos: compiled.readout_pos,
        },
    )
}

fn tracr_ft_config(lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Protocol::Finetune, lr, 10_000, seed);
    cfg.optimizer = OptimizerKind::SgdMomentum;
    cfg.warmup = 2000;
    cfg.eval_every = 1000;
    cfg.eval_size = 2000;
    cfg
}

#[test]
#[ignore = "slow suite: ~half-hour compiled-model fine-tuning run"]
fn criterion_2_tracr_strong_lr() {
    let t0 = Instant::now();
    let (model, setup) = desk_counter_setup(0.0);
    let cfg = tracr_ft_config(1e-1, 5);
    let (_, record) = tracr_finetune(model, &setup, &cfg).unwrap();
    let acc = record.last().acc_ft_c0;
    assert!(verdict(
        "2 compiled-model strong-lr fine-tuning",
        acc >= 98.0,
        format!("acc_ft(c=0) {acc:.2} after 10K iters; {:.0}s", t0.elapsed().as_secs_f64())
    ));
}

#[test]
#[ignore = "slow suite: ~half-hour compiled-model fine-tuning run plus pruning"]
fn criterion_3_and_4_wrapped_capability_and_single_weight_prune() {
    let t0 = Instant::now();
    let (model, setup) = desk_counter_setup(1.0);
    let cfg = tracr_ft_config(1e-3, 5);
    let (ft_model, record) = tracr_finetune(model, &setup, &cfg).unwrap();
    let last = record.last();
    let pass3 = last.acc_ft_c1 >= 85.0 && last.acc_ft_c0 <= 15.0;
    let ok3 = verdict(
        "3 compiled-model wrapped capability",
        pass3,
        format!(
            "acc_ft(c=1) {:.2}, acc_ft(c=0) {:.2}; {:.0}s",
            last.acc_ft_c1,
            last.acc_ft_c0,
            t0.elapsed().as_secs_f64()
        ),
    );

    // Criterion 4: K=1 weight prune toward the pretraining task.
    let prune_data = setup.pt_batch(512, 999).unwrap();
    let evals = setup.eval_batches(&cfg).unwrap();
    let before = evaluate(&ft_model, &evals[0]);
    let (pruned, mask) = saliency_prune(&ft_model, &prune_data, 1, Granularity::Weight);
    let after = evaluate(&pruned, &evals[0]);
    let hist = prediction_histogram(&pruned, &evals[0]);
    let pass4 = after - before >= 40.0 && hist.len() >= 5;
    let ok4 = verdict(
        "4 single-weight prune revival",
        pass4,
        format!(
            "pt acc {before:.2} -> {after:.2} (pruned {}[{}]), {} predicted classes",
            mask.units[0].param,
            mask.units[0].index,
            hist.len()
        ),
    );
    assert!(ok3 && ok4);
}

#[test]
fn criterion_5_gradient_correctness() {
    let t0 = Instant::now();
    const FD_H: f64 = 1e-4;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);

    // Primitive sweep: one composite graph exercising every op.
    let mut rng = Rng::new(4);
    let cfg = TransformerConfig::tiny_shape(32, 12);
    let state = ModelState::new_random(cfg.clone(), 2);
    let params64: Vec<Tensor<f64>> = state.params.iter().map(|t| t.map_to::<f64>()).collect();
    let n = 3;
    let t = 12;
    let tokens: Vec<u16> = (0..n * t).map(|_| rng.below(32) as u16).collect();
    let targets: Vec<u32> = (0..n * t).map(|_| rng.below(32) as u32).collect();
    let weights: Vec<f64> = (0..n * t).map(|i| ((i % 2) as f64 + 1.0) / 2.0).collect();
    let run = |params: &[Tensor<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let vars = load_param_tensors(&mut tape, &cfg, params);
        let out = forward(&mut tape, &vars, &cfg, &tokens, n, t);
        let loss = tape.cross_entropy(out.logits, &targets, &weights);
        tape.value(loss).data[0]
    };
    let mut tape: Tape<f64> = Tape::new();
    let vars = load_param_tensors(&mut tape, &cfg, &params64);
    let out = forward(&mut tape, &vars, &cfg, &tokens, n, t);
    let loss = tape.cross_entropy(out.logits, &targets, &weights);
    let grads = tape.backward(loss);

    let names = cfg.param_names();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut srng = Rng::new(6);
    'outer: for (pi, name) in names.iter().enumerate() {
        let g = grads.get(vars.vars[pi]).unwrap();
        for _ in 0..8 {
            let j = srng.usize_below(params64[pi].numel());
            if name == "embed.tok" && !tokens.contains(&((j / cfg.d_model) as u16)) {
                continue;
            }
            let mut plus = params64.clone();
            plus[pi].data[j] += FD_H;
            let mut minus = params64.clone();
            minus[pi].data[j] -= FD_H;
            let fd = (run(&plus) - run(&minus)) / (2.0 * FD_H);
            let e = rel(fd, g.data[j]);
            worst = worst.max(e);
            checked += 1;
            if checked >= 240 {
                break 'outer;
            }
        }
    }
    let pass = checked >= 200 && worst < 1e-4;
    assert!(verdict(
        "5 gradient correctness",
        pass,
        format!(
            "{checked} parameters, worst rel err {worst:.2e}; {:.1}s",
            t0.elapsed().as_secs_f64()
        )
    ));
    assert!(t0.elapsed().as_secs_f64() < 60.0, "criterion 5 runtime bound");
}

/// Shared slow-suite context so criterion 7 reuses criterion 6's models.
struct PcfgSuite {
    exp_low: PcfgExperiment,
    ft_low: ModelState,
}

fn pcfg_train_config(protocol: Protocol, lr: f64, iters: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(protocol, lr, iters, seed);
    cfg.eval_every = 100;
    cfg.eval_size = 2000;
    cfg
}

#[test]
#[ignore = "slow suite: multi-hour grammar-model pretraining and analysis"]
fn criterion_6_and_7_pcfg_pipeline() {
    let t0 = Instant::now();
    let mut all_pass = true;

    // --- 6(a): high-prior pretraining learns the counting task.
    let exp_high = PcfgExperiment::desk_default(SamplingPrior::high());
    let cfg_pt = pcfg_train_config(Protocol::Pretrain, 1e-3, 10_000, 40);
    let (model_high, rec_high) = pretrain(&exp_high, exp_high.model_config("tiny"), &cfg_pt).unwrap();
    let acc_a = rec_high.last().acc_pt_c0;
    all_pass &= verdict(
        "6a high-prior pretraining",
        acc_a >= 95.0,
        format!("counting-a acc {acc_a:.2} at 10K iters; {:.0}s elapsed", t0.elapsed().as_secs_f64()),
    );

    // --- 6(b): low-prior pretrain, then small-lr fine-tuning under a full
    // correlation exploits the shortcut.
    let exp_low = PcfgExperiment::desk_default(SamplingPrior::low());
    let (model_low, _) = pretrain(&exp_low, exp_low.model_config("tiny"), &cfg_pt).unwrap();
    let cfg_ft = pcfg_train_config(Protocol::Finetune, 1e-6, 10_000, 41);
    let (ft_low, rec_ft) = finetune(model_low.clone(), &exp_low, &cfg_ft).unwrap();
    let last = rec_ft.last();
    let gap = last.acc_ft_c1 - last.acc_ft_c0;
    all_pass &= verdict(
        "6b correlation exploitation at small lr",
        gap >= 50.0,
        format!(
            "acc_ft(c=1) {:.2} - acc_ft(c=0) {:.2} = {gap:.2}; {:.0}s elapsed",
            last.acc_ft_c1,
            last.acc_ft_c0,
            t0.elapsed().as_secs_f64()
        ),
    );

    // --- 6(c): pruning at most 15 neurons revives the pretraining task.
    let prune_ds = natural_dataset(
        &exp_low.grammar,
        &exp_low.vocab,
        &exp_low.pt_task(),
        512,
        4242,
        exp_low.txt_len,
        exp_low.context_len,
    )
    .unwrap();
    let prune_batch = Batch::answer_only(&prune_ds.samples);
    let mk_eval = |task: &TaskSpec, c: f64, salt: u64| -> Batch {
        let ds = dataset_for_task(
            &exp_low.grammar,
            &exp_low.vocab,
            task,
            &exp_low.corr,
            c,
            2000,
            4300 + salt,
            exp_low.txt_len,
            exp_low.context_len,
            "acceptance",
        )
        .unwrap();
        Batch::answer_only(&ds.samples)
    };
    let pt_eval = mk_eval(&exp_low.pt_task(), 0.0, 1);
    let ft_eval = mk_eval(&exp_low.ft_task(), 0.0, 2);
    let ks = [0usize, 1, 2, 5, 10, 15];
    let curve = prune_curve(&ft_low, &prune_batch, &ks, Granularity::Neuron, &pt_eval, &ft_eval);
    let base_pt = curve[0].1;
    let best = curve
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    all_pass &= verdict(
        "6c neuron-prune revival",
        best.1 - base_pt >= 40.0,
        format!(
            "pt acc {base_pt:.2} -> {:.2} at K={} (curve {:?})",
            best.1,
            best.0,
            curve.iter().map(|(k, p, f)| format!("{k}:{p:.0}/{f:.0}")).collect::<Vec<_>>()
        ),
    );

    // --- 6(d): a middle block still decodes the pretraining count.
    let probe_ds = natural_dataset(
        &exp_low.grammar,
        &exp_low.vocab,
        &exp_low.pt_task(),
        20_000,
        4400,
        exp_low.txt_len,
        exp_low.context_len,
    )
    .unwrap();
    let probe_batch = Batch::answer_only(&probe_ds.samples);
    let labels: Vec<u32> = probe_batch.answers.clone();
    let report = probe_sweep(&ft_low, &probe_batch, &labels, 4500);
    let mid_best = report
        .block_accuracies
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    all_pass &= verdict(
        "6d probe decodes pretraining count",
        mid_best >= 2.0 * report.chance,
        format!(
            "best block probe {mid_best:.2} vs chance {:.2} (blocks {:?})",
            report.chance,
            report
                .block_accuracies
                .iter()
                .map(|a| format!("{a:.1}"))
                .collect::<Vec<_>>()
        ),
    );

    // --- 7: reverse fine-tuning beats the from-scratch baseline, the
    // strong-prior revival is fast, and capability removal stays cheap to
    // undo.
    let suite = PcfgSuite { exp_low, ft_low };
    let cfg_reft = pcfg_train_config(Protocol::Reft, 1e-5, 10_000, 42);
    let (_, rec_reft) = reverse_finetune(suite.ft_low.clone(), &suite.exp_low, &cfg_reft).unwrap();
    let reft_iter = rec_reft.threshold_iteration(95.0);

    // Baseline: pretrained only on counting the fine-tuning operand.
    let mut exp_scratch = suite.exp_low.clone();
    exp_scratch.prior = SamplingPrior::concentrated(suite.exp_low.corr.o_ft, 3);
    let (scratch_base, _) = pretrain(&exp_scratch, exp_scratch.model_config("tiny"), &cfg_pt).unwrap();
    let mut cfg_scr = cfg_reft.clone();
    cfg_scr.protocol = Protocol::Scratch;
    let (_, rec_scr) =
        scratch_ft_baseline(scratch_base, &suite.exp_low, &cfg_scr, &cfg_reft).unwrap();
    let scr_iter = rec_scr.threshold_iteration(95.0);

    let reft_beats_baseline = match (reft_iter, scr_iter) {
        (Some(r), Some(s)) => r < s,
        (Some(_), None) => true,
        _ => false,
    };

    // Strong-prior case: fine-tune the high-prior model, then revive.
    let (ft_high, _) = finetune(model_high, &exp_high, &cfg_ft).unwrap();
    let (_, rec_reft_high) = reverse_finetune(ft_high, &exp_high, &cfg_reft).unwrap();
    let reft_high_iter = rec_reft_high.threshold_iteration(95.0);
    let high_fast = matches!(reft_high_iter, Some(i) if i <= 1000);

    // Capability removal: wrong-label training, then revival again.
    let cfg_rand = pcfg_train_config(Protocol::RandFt, 1e-5, 3000, 43);
    let (rand_model, rec_rand) = rand_finetune(model_low, &suite.exp_low, &cfg_rand).unwrap();
    let post_rand = rec_rand.last().acc_pt_c0;
    let (_, rec_rr) = reverse_finetune(rand_model, &suite.exp_low, &cfg_reft).unwrap();
    let rr_iter = rec_rr.threshold_iteration(95.0);
    let rand_ok = post_rand < 20.0
        && match (rr_iter, scr_iter) {
            (Some(r), Some(s)) => r < s,
            (Some(_), None) => true,
            _ => false,
        };

    all_pass &= verdict(
        "7 reverse fine-tuning sample efficiency",
        reft_beats_baseline && high_fast && rand_ok,
        format!(
            "reFT {reft_iter:?} vs baseline {scr_iter:?}; strong-prior reFT {reft_high_iter:?}; post-removal acc {post_rand:.1}, its reFT {rr_iter:?}; total {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(all_pass);
}

#[test]
fn criterion_8_data_statistics() {
    let t0 = Instant::now();
    let g = default_grammar();
    let vocab = ftlab::vocab::Vocabulary::for_grammar(&g);
    let task = TaskSpec::new(TaskFamily::Count, Some(1));
    let corr = CorrelationSpec::new(0, 1, 1, 0.8);

    // Correlated fraction within +-2% at n = 10,000.
    let ds = ftlab::data::finetune_dataset(&g, &vocab, &task, &corr, 10_000, 7, 60, 72).unwrap();
    let frac = ds.correlated_fraction();
    let frac_ok = (frac - 0.8).abs() <= 0.02;

    // Operand frequencies within +-1% at n = 30,000.
    let stream = PretrainStream::new(
        g.clone(),
        vocab.clone(),
        vec![FamilyChoice::plain(TaskFamily::Count)],
        SamplingPrior::high(),
        8,
        60,
        72,
    );
    let mut counts = [0usize; 3];
    for s in stream.take(30_000) {
        let d = decode_sample(&vocab, &s.token_ids).unwrap();
        counts[d.operand.unwrap() as usize] += 1;
    }
    let mut prior_ok = true;
    for (i, expect) in [0.5f64, 0.3, 0.2].iter().enumerate() {
        prior_ok &= (counts[i] as f64 / 30_000.0 - expect).abs() <= 0.01;
    }

    // Every stored answer equals the naive scan.
    let mut mismatches = 0usize;
    for s in &ds.samples {
        let d = decode_sample(&vocab, &s.token_ids).unwrap();
        let window = &d.txt[d.txt.len() - 40..];
        let naive = window.iter().filter(|&&t| t == 1).count() as u32;
        if naive != s.answer_value {
            mismatches += 1;
        }
    }

    let pass = frac_ok && prior_ok && mismatches == 0;
    assert!(verdict(
        "8 data statistics",
        pass,
        format!(
            "correlated fraction {frac:.4}, operand freqs {:?}, {mismatches} oracle mismatches; {:.1}s",
            counts.map(|c| format!("{:.3}", c as f64 / 30_000.0)),
            t0.elapsed().as_secs_f64()
        )
    ));
}

#[test]
fn criterion_9_determinism() {
    let t0 = Instant::now();
    let mut exp = PcfgExperiment::desk_default(SamplingPrior::high());
    exp.txt_len = 44;
    exp.context_len = 56;
    let mut cfg = pcfg_train_config(Protocol::Pretrain, 1e-3, 120, 90);
    cfg.batch_size = 16;
    cfg.eval_every = 40;
    cfg.eval_size = 64;

    let run = || {
        let (model, record) = pretrain(&exp, exp.model_config("tiny"), &cfg).unwrap();
        // Serialize the checkpoint to bytes for a bitwise comparison.
        let dir = std::env::temp_dir().join(format!("ftlab_acc9_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ftck");
        ftlab::checkpoint::save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        (bytes, record.to_csv())
    };
    let (bytes1, csv1) = run();
    let (bytes2, csv2) = run();
    let pass = bytes1 == bytes2 && csv1 == csv2;
    assert!(verdict(
        "9 determinism",
        pass,
        format!(
            "checkpoint bytes {} / metrics CSV {}; {:.1}s",
            if bytes1 == bytes2 { "identical" } else { "differ" },
            if csv1 == csv2 { "identical" } else { "differ" },
            t0.elapsed().as_secs_f64()
        )
    ));
}
