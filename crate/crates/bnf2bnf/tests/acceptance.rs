//! Acceptance suite. Each criterion prints one `criterion N ...: pass|FAIL`
//! line and asserts it, so `cargo test --test acceptance -- --nocapture`
//! doubles as a readable report.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bnf2bnf::checkpoint::{corpus_fingerprint, Checkpoint};
use bnf2bnf::evaluation::{dataset_size_experiment, run_evaluation};
use bnf2bnf::numerics::{finite_difference_gradient, ParamStore, Tape, Tensor};
use bnf2bnf::synthesizer::{masked_mse, synthesizer_loss, SynthConfig, SynthesizerModel};
use bnf2bnf::toycorpus::{
    derive_seed, generate_corpus, load_corpus, oracle_decode, sample_durations,
    sample_source_sentence, CorpusGenConfig, FeatureRenderer, ToyLanguageSpec,
    UtterancePair,
};
use bnf2bnf::training::{
    stop_token_target, train_loop, train_step, translator_loss, AdamState, TrainConfig,
};
use bnf2bnf::translator::{Feedback, TranslatorConfig, TranslatorModel};

fn report(n: u32, name: &str, pass: bool) {
    println!("criterion {n} ({name}): {}", if pass { "pass" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed");
}

/// Reduced model sized for exhaustive finite differences: 4-dim features,
/// two 6-unit LSTM layers, 2 attention mixtures, 2 postnet conv layers,
/// 2 synthesizer blocks. Dropout off so the objective is deterministic.
fn reduced_configs() -> (TranslatorConfig, SynthConfig) {
    let translator = TranslatorConfig {
        d_in: 4,
        d_out: 4,
        prenet_dims: vec![6, 6],
        prenet_dropout: 0.0,
        lstm_dim: 6,
        lstm_layers: 2,
        attn_mixtures: 2,
        attn_hidden: 8,
        attn_sigma_min: 0.1,
        postnet_kernel: 3,
        postnet_channels: 6,
        postnet_layers: 2,
        max_decode_steps: 20,
        feedback: Feedback::Coarse,
    };
    let synth = SynthConfig {
        d_in: 4,
        d_mel: 3,
        glu_kernel: 3,
        conv_channels: 6,
        dw_kernel: 3,
        dw_stride: 1,
        dropout_rate: 0.0,
        n_blocks: 2,
        upsample_factor: 1,
    };
    (translator, synth)
}

fn reduced_models(seed: u64) -> (TranslatorModel, SynthesizerModel, ParamStore) {
    let (tc, sc) = reduced_configs();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let translator = TranslatorModel::new(tc, &mut store, &mut rng).unwrap();
    let synth = SynthesizerModel::new(sc, &mut store, &mut rng).unwrap();
    (translator, synth, store)
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();
    let (translator, synth, mut store) = reduced_models(41);
    let mut data_rng = ChaCha8Rng::seed_from_u64(42);
    let f_src = random_tensor(&mut data_rng, 3, 4);
    let f_tgt = random_tensor(&mut data_rng, 3, 4);
    let mel = random_tensor(&mut data_rng, 3, 3);
    let s_tgt = stop_token_target(3, 3).unwrap();

    // analytic pass: the full joint objective exactly as trained, with the
    // synthesizer fed from the translator's fine output
    store.zero_grad();
    let mut tape = Tape::new();
    let mut pass_rng = ChaCha8Rng::seed_from_u64(7);
    let out = translator
        .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut pass_rng, true, None)
        .unwrap();
    let (l_trans, ..) = translator_loss(&mut tape, &out, &f_tgt, &s_tgt, None).unwrap();
    let synth_out = synth
        .forward(&mut tape, &store, out.fine, &mut pass_rng, true, None)
        .unwrap();
    let (l_synth, _) = synthesizer_loss(&mut tape, &synth_out, &mel, None).unwrap();
    let total = tape.add(l_trans, l_synth).unwrap();
    // the postnet consumes a stop-gradient copy of the coarse sequence, so
    // the finite-difference probe must hold that input frozen at its
    // baseline values — otherwise it measures a different function than the
    // one the analytic gradient (deliberately) differentiates
    let coarse_baseline = tape.to_tensor(out.coarse);
    tape.backward(total, &mut store).unwrap();

    let stop_target = Tensor::new(vec![3, 1], s_tgt.clone()).unwrap();
    let numeric = finite_difference_gradient(&mut store, 1e-5, &mut |s| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = translator
            .forward_teacher_forced(&mut tape, s, &f_src, &f_tgt, &mut rng, true, None)
            .unwrap();
        let l_coarse = masked_mse(&mut tape, out.coarse, &f_tgt, None).unwrap();
        let l_stop = masked_mse(&mut tape, out.stops, &stop_target, None).unwrap();
        let frozen = tape.constant(&coarse_baseline);
        let fine = translator.postnet(&mut tape, s, frozen, None).unwrap();
        let l_fine = masked_mse(&mut tape, fine, &f_tgt, None).unwrap();
        let synth_out = synth.forward(&mut tape, s, fine, &mut rng, true, None).unwrap();
        let (l_synth, _) = synthesizer_loss(&mut tape, &synth_out, &mel, None).unwrap();
        let cf = tape.add(l_coarse, l_fine).unwrap();
        let trans = tape.add(cf, l_stop).unwrap();
        let total = tape.add(trans, l_synth).unwrap();
        tape.scalar(total)
    })
    .unwrap();
    // central differences cannot resolve differences below the roundoff of
    // the objective itself: |f(θ+ε) − f(θ−ε)| carries ~1 ulp(f) of noise, so
    // the numeric gradient has an absolute noise floor of ulp(f)/(2ε).
    // Entries whose disagreement sits inside 8x that floor are consistent
    // with an exact analytic gradient; genuine backward bugs observed during
    // development produced disagreements 6+ orders of magnitude above it.
    let objective = {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = translator
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, true, None)
            .unwrap();
        let (l_trans, ..) = translator_loss(&mut tape, &out, &f_tgt, &s_tgt, None).unwrap();
        let synth_out = synth
            .forward(&mut tape, &store, out.fine, &mut rng, true, None)
            .unwrap();
        let (l_synth, _) = synthesizer_loss(&mut tape, &synth_out, &mel, None).unwrap();
        let total = tape.add(l_trans, l_synth).unwrap();
        tape.scalar(total)
    };
    let fd_noise = 8.0 * objective.abs() * f64::EPSILON / (2.0 * 1e-5);
    let mut worst = 0.0f64;
    for (id, num) in store.ids().collect::<Vec<_>>().into_iter().zip(&numeric) {
        let ana = store.get(id).grad.as_deref().unwrap();
        for (&a, &n) in ana.iter().zip(num) {
            if (a.abs() < 1e-8 && n.abs() < 1e-8) || (a - n).abs() <= fd_noise {
                continue;
            }
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        }
    }
    let elapsed = started.elapsed();
    println!("  max relative gradient error {worst:.3e} in {elapsed:.2?}");
    report(
        1,
        "gradient fidelity",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
    );
}

#[test]
fn criterion_2_loss_additivity() {
    let (translator, synth, mut store) = reduced_models(51);
    let mut adam = AdamState::new(&mut store);
    let cfg = TrainConfig {
        batch_size: 3,
        max_steps: 100,
        phase_boundary_step: 50,
        seed: 51,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut exact = true;
    for step in 0..100u64 {
        let pairs: Vec<UtterancePair> = (0..3)
            .map(|_| {
                let t_src = rng.gen_range(3..9);
                let t_tgt = rng.gen_range(3..9);
                UtterancePair {
                    source_tokens: vec![0; t_src],
                    target_tokens: vec![0; t_tgt],
                    f_src: random_tensor(&mut rng, t_src, 4),
                    f_tgt: random_tensor(&mut rng, t_tgt, 4),
                    mel: random_tensor(&mut rng, t_tgt, 3),
                    speaker: 0,
                }
            })
            .collect();
        let batch: Vec<&UtterancePair> = pairs.iter().collect();
        let lb = train_step(&mut store, &mut adam, &translator, &synth, &batch, step, &cfg)
            .unwrap();
        let translator_sum = (lb.l_coarse + lb.l_fine) + lb.l_stop;
        let mut synth_sum = lb.l_synth_blocks[0];
        for &b in &lb.l_synth_blocks[1..] {
            synth_sum += b;
        }
        exact &= lb.l_translator == translator_sum
            && lb.l_synthesizer == synth_sum
            && lb.l_total == translator_sum + synth_sum;
    }
    report(2, "loss additivity over 100 random batches", exact);
}

#[test]
fn criterion_3_stop_gradient_isolation() {
    let (translator, _synth, mut store) = reduced_models(61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let f_src = random_tensor(&mut rng, 5, 4);
    let f_tgt = random_tensor(&mut rng, 6, 4);

    let pre_coarse = |name: &str| name.starts_with("translator.") && !name.contains(".postnet.");
    let postnet = |name: &str| name.contains(".postnet.");

    // L_fine alone must not reach anything upstream of the coarse output
    store.zero_grad();
    let mut tape = Tape::new();
    let mut step_rng = ChaCha8Rng::seed_from_u64(63);
    let out = translator
        .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut step_rng, true, None)
        .unwrap();
    let (_, _lc, l_fine, _ls) = translator_loss(&mut tape, &out, &f_tgt, &[0.0; 6], None).unwrap();
    tape.backward(l_fine, &mut store).unwrap();
    let fine_only_ok = store.grad_norm_where(pre_coarse) == 0.0 && store.grad_norm_where(postnet) > 0.0;

    // L_coarse alone must not reach the postnet
    store.zero_grad();
    let mut tape = Tape::new();
    let mut step_rng = ChaCha8Rng::seed_from_u64(63);
    let out = translator
        .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut step_rng, true, None)
        .unwrap();
    let (_, l_coarse, _lf, _ls) = translator_loss(&mut tape, &out, &f_tgt, &[0.0; 6], None).unwrap();
    tape.backward(l_coarse, &mut store).unwrap();
    let coarse_only_ok =
        store.grad_norm_where(postnet) == 0.0 && store.grad_norm_where(pre_coarse) > 0.0;

    report(3, "stop-gradient isolation", fine_only_ok && coarse_only_ok);
}

#[test]
fn criterion_4_phase_schedule_isolation() {
    let (translator, synth, mut store) = reduced_models(71);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let f_src = random_tensor(&mut rng, 5, 4);
    let f_tgt = random_tensor(&mut rng, 6, 4);
    let mel = random_tensor(&mut rng, 6, 3);
    let is_translator = |name: &str| name.starts_with("translator.");

    let synth_grad_norm = |store: &mut ParamStore, joint: bool| -> f64 {
        store.zero_grad();
        let mut tape = Tape::new();
        let mut step_rng = ChaCha8Rng::seed_from_u64(73);
        let out = translator
            .forward_teacher_forced(&mut tape, store, &f_src, &f_tgt, &mut step_rng, true, None)
            .unwrap();
        let synth_in = if joint { out.fine } else { tape.constant(&f_tgt) };
        let synth_out = synth
            .forward(&mut tape, store, synth_in, &mut step_rng, true, None)
            .unwrap();
        let (l_synth, _) = synthesizer_loss(&mut tape, &synth_out, &mel, None).unwrap();
        tape.backward(l_synth, store).unwrap();
        store.grad_norm_where(is_translator)
    };

    let before_boundary = synth_grad_norm(&mut store, false);
    let after_boundary = synth_grad_norm(&mut store, true);
    println!("  translator grad norm from L_synth: pre-phase {before_boundary:e}, joint {after_boundary:e}");
    report(
        4,
        "phase-schedule isolation",
        before_boundary == 0.0 && after_boundary > 0.0,
    );
}

#[test]
fn criterion_5_attention_monotonicity() {
    let mut steps = 0usize;
    let mut violations = 0usize;
    let mut seed = 0u64;
    while steps < 1000 {
        seed += 1;
        let (translator, _synth, store) = reduced_models(1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let t_src = rng.gen_range(3..12);
        let f_src = random_tensor(&mut rng, t_src, 4);
        let inf = translator.infer(&store, &f_src, &mut rng, true).unwrap();
        for w in inf.mu_trace.windows(2) {
            steps += 1;
            violations += w[0]
                .iter()
                .zip(&w[1])
                .filter(|(prev, next)| next < prev)
                .count();
        }
    }
    println!("  {steps} decoder steps, {violations} violations");
    report(5, "attention monotonicity", violations == 0);
}

/// Criteria 6 and 7 share the full-scale toy recipe; they are combined so the
/// dataset-size experiment is not distorted by a concurrently running copy of
/// the same training loop.
#[test]
fn criteria_6_and_7_toy_training_and_data_trend() {
    let budget = Duration::from_secs(45 * 60);
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    let gen_cfg = CorpusGenConfig::default();
    let train_cfg = TrainConfig::default();
    let translator_cfg = TranslatorConfig::toy();
    let synth_cfg = SynthConfig::toy();

    // criterion 6: end-to-end toy training
    let c6_started = Instant::now();
    let meta = generate_corpus(&gen_cfg, &corpus_dir).unwrap();
    let corpus = load_corpus(&corpus_dir).unwrap();
    let fingerprint = corpus_fingerprint(&corpus_dir).unwrap();
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, 0x1217));
    let translator = TranslatorModel::new(translator_cfg.clone(), &mut store, &mut init_rng).unwrap();
    let synth = SynthesizerModel::new(synth_cfg.clone(), &mut store, &mut init_rng).unwrap();
    let outcome = train_loop(
        &corpus,
        &meta.train,
        &translator,
        &synth,
        &mut store,
        &train_cfg,
        &dir.path().join("c6_run"),
        serde_json::json!({"suite": "acceptance"}),
        fingerprint,
        None,
    )
    .unwrap();
    let eval = run_evaluation(&corpus, &meta.eval, &translator, &synth, &store, train_cfg.seed)
        .unwrap();
    let c6_elapsed = c6_started.elapsed();
    let initial = outcome.first_loss.as_ref().unwrap().l_total;
    let last = outcome.last_loss.as_ref().unwrap().l_total;
    println!(
        "  {} steps in {c6_elapsed:.1?}: L_total {initial:.3} -> {last:.3}, BLEU {:.3}, \
         attention pass {:.3}, cap-hit {:.3} on {} held-out pairs",
        outcome.final_step, eval.corpus_bleu, eval.attention_pass_rate, eval.cap_hit_rate,
        eval.utterances,
    );
    report(
        6,
        "end-to-end toy training",
        outcome.final_step <= 20_000
            && c6_elapsed < budget
            && last < 0.2 * initial
            && eval.corpus_bleu >= 0.6
            && eval.attention_pass_rate >= 0.9
            && eval.cap_hit_rate <= 0.1,
    );

    // criterion 7: dataset-size trend under the identical training recipe.
    // The trend corpus is smaller than the criterion-6 preset so that data
    // size actually binds: at full preset scale even the quarter split is
    // enough to saturate the toy task, which would flatten the trend. A
    // 550-pair corpus puts the quarter split (124 pairs) below the amount
    // needed to learn the task at all and the full split (496 pairs) well
    // above it, reproducing the source experiment's design of spanning
    // data scales from failure to competence.
    let c7_started = Instant::now();
    let trend_corpus_dir = dir.path().join("trend_corpus");
    let trend_gen_cfg = CorpusGenConfig { size: 550, ..CorpusGenConfig::default() };
    generate_corpus(&trend_gen_cfg, &trend_corpus_dir).unwrap();
    let trend_corpus = load_corpus(&trend_corpus_dir).unwrap();
    let trend_fingerprint = corpus_fingerprint(&trend_corpus_dir).unwrap();
    let results = dataset_size_experiment(
        &trend_corpus,
        &[0.25, 0.5, 1.0],
        &translator_cfg,
        &synth_cfg,
        &train_cfg,
        &dir.path().join("c7_runs"),
        serde_json::json!({"suite": "acceptance"}),
        trend_fingerprint,
    )
    .unwrap();
    let c7_elapsed = c7_started.elapsed();
    let bleus: Vec<f64> = results.iter().map(|(_, r)| r.corpus_bleu).collect();
    println!("  fraction BLEU {bleus:?} in {c7_elapsed:.1?}");
    report(
        7,
        "dataset-size trend",
        bleus.windows(2).all(|w| w[1] >= w[0])
            && bleus[2] - bleus[0] >= 0.1
            && c7_elapsed < 3 * budget,
    );
}

fn metrics_without_seconds(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split('\t').collect();
            cols.pop();
            cols.join("\t")
        })
        .collect()
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    generate_corpus(
        &CorpusGenConfig {
            size: 80,
            eval_fraction: 0.1,
            seed: 13,
            ..CorpusGenConfig::default()
        },
        &corpus_dir,
    )
    .unwrap();
    let corpus = load_corpus(&corpus_dir).unwrap();
    let fingerprint = corpus_fingerprint(&corpus_dir).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: 50,
        phase_boundary_step: 25,
        checkpoint_interval: 10,
        seed: 13,
        ..TrainConfig::default()
    };
    let snapshot = serde_json::json!({"suite": "acceptance c8"});

    let run = |out_dir: &Path, resume: Option<&Checkpoint>| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1217));
        let translator = TranslatorModel::new(TranslatorConfig::toy(), &mut store, &mut rng).unwrap();
        let synth = SynthesizerModel::new(SynthConfig::toy(), &mut store, &mut rng).unwrap();
        train_loop(
            &corpus,
            &corpus.meta.train,
            &translator,
            &synth,
            &mut store,
            &cfg,
            out_dir,
            snapshot.clone(),
            fingerprint.clone(),
            resume,
        )
        .unwrap();
    };

    let dir_a = dir.path().join("a");
    let dir_b = dir.path().join("b");
    run(&dir_a, None);
    run(&dir_b, None);
    let metrics_a = metrics_without_seconds(&dir_a.join("metrics.tsv"));
    let same_metrics = metrics_a == metrics_without_seconds(&dir_b.join("metrics.tsv"))
        && metrics_a.len() == 51; // header + 50 steps
    let same_final = std::fs::read(dir_a.join("ckpt_000050.ckpt")).unwrap()
        == std::fs::read(dir_b.join("ckpt_000050.ckpt")).unwrap();

    // checkpoint round trip: load then save must reproduce the bytes
    let ck = Checkpoint::load(&dir_a.join("ckpt_000050.ckpt")).unwrap();
    let resaved = dir.path().join("resaved.ckpt");
    ck.save(&resaved).unwrap();
    let round_trip = std::fs::read(dir_a.join("ckpt_000050.ckpt")).unwrap()
        == std::fs::read(&resaved).unwrap();

    // resuming from step 10 must land exactly where the uninterrupted run did
    let dir_c = dir.path().join("c");
    let at_10 = Checkpoint::load(&dir_a.join("ckpt_000010.ckpt")).unwrap();
    run(&dir_c, Some(&at_10));
    let resume_ok = ["ckpt_000020.ckpt", "ckpt_000030.ckpt", "ckpt_000040.ckpt", "ckpt_000050.ckpt"]
        .iter()
        .all(|name| {
            std::fs::read(dir_a.join(name)).unwrap() == std::fs::read(dir_c.join(name)).unwrap()
        })
        && metrics_a[11..] == metrics_without_seconds(&dir_c.join("metrics.tsv"))[..];

    println!(
        "  metrics bitwise: {same_metrics}, final checkpoint bitwise: {same_final}, \
         round trip: {round_trip}, resume: {resume_ok}"
    );
    report(
        8,
        "determinism and persistence",
        same_metrics && same_final && round_trip && resume_ok,
    );
}

/// Second, deliberately naive rule interpreter: resolves output positions
/// first, then substitutes and expands while emitting.
fn naive_interpreter(src: &[usize], spec: &ToyLanguageSpec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..src.len()).collect();
    let mut i = 0;
    while i + 1 < order.len() {
        let here = (src[order[i]], src[order[i + 1]]);
        if spec.swap_pairs.iter().any(|&p| p == here) {
            order.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut out = Vec::new();
    for &pos in &order {
        let s = src[pos];
        out.push(spec.substitution[s]);
        for &(e, c) in &spec.expansions {
            if e == s {
                out.push(c);
            }
        }
    }
    out
}

#[test]
fn criterion_9_oracle_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let spec = ToyLanguageSpec::sample(24, &mut rng).unwrap();
    let clean = FeatureRenderer::sample(24, 16, 8, 1, 0.0, 1, &mut rng).unwrap();

    let mut decode_errors = 0usize;
    for _ in 0..10_000 {
        let tokens = sample_source_sentence(&spec, &mut rng);
        let durations = sample_durations(&spec, tokens.len(), &mut rng);
        let rendered = clean
            .render_bnf(&tokens, &durations, None, &mut rng)
            .unwrap();
        let decoded = oracle_decode(&rendered, &clean.bnf_codebook, None, 1).unwrap();
        decode_errors += (decoded != tokens) as usize;
    }

    let mut translate_mismatches = 0usize;
    for _ in 0..10_000 {
        // unconstrained sentences, including adjacent repeats
        let len = rng.gen_range(1..=10);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..24)).collect();
        let via_rules = bnf2bnf::toycorpus::translate_tokens(&src, &spec).unwrap();
        translate_mismatches += (via_rules != naive_interpreter(&src, &spec)) as usize;
    }

    println!("  10k renders: {decode_errors} decode errors; 10k sentences: {translate_mismatches} interpreter mismatches");
    report(
        9,
        "oracle soundness",
        decode_errors == 0 && translate_mismatches == 0,
    );
}
