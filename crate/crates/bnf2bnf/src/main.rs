//! Command-line surface: corpus generation, training, inference, evaluation.
//!
//! Grammar: `bnf2bnf <gen-data|train|infer|eval> [--config=PATH] [--key=value ...]`
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bnf2bnf::checkpoint::{corpus_fingerprint, Checkpoint};
use bnf2bnf::config::{parse_config, RunConfig};
use bnf2bnf::container::Container;
use bnf2bnf::evaluation::run_evaluation;
use bnf2bnf::numerics::{ParamStore, Tape};
use bnf2bnf::synthesizer::SynthesizerModel;
use bnf2bnf::toycorpus::{derive_seed, generate_corpus, load_corpus, oracle_decode};
use bnf2bnf::training::train_loop;
use bnf2bnf::translator::{alignment_to_text, TranslatorModel};
use bnf2bnf::{Error, Result};

const USAGE: &str = "usage: bnf2bnf <gen-data|train|infer|eval> [--config=PATH] [--key=value ...]
  gen-data                 write a procedural corpus to corpus_dir
  train [--resume=CKPT]    train and write checkpoints + metrics to run_dir
  infer --checkpoint=CKPT --input=FILE [--output=FILE]
                           translate one feature file to a mel-analog file
  eval  --checkpoint=CKPT [--force=true]
                           evaluate on the held-out split, write eval_report.json";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(match dispatch(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    });
}

/// Flags the CLI consumes itself, as opposed to config overrides.
#[derive(Default)]
struct CliFlags {
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    resume: Option<PathBuf>,
    force: bool,
}

fn parse_args(args: &[String]) -> Result<(String, CliFlags, Vec<(String, String)>)> {
    let Some(command) = args.first() else {
        return Err(Error::Usage(USAGE.into()));
    };
    let mut cli = CliFlags::default();
    let mut overrides = Vec::new();
    for arg in &args[1..] {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument {arg:?}\n{USAGE}")));
        };
        let Some((key, value)) = body.split_once('=') else {
            return Err(Error::Usage(format!(
                "flags take the form --key=value, got {arg:?}"
            )));
        };
        match key {
            "config" => cli.config = Some(PathBuf::from(value)),
            "checkpoint" => cli.checkpoint = Some(PathBuf::from(value)),
            "input" => cli.input = Some(PathBuf::from(value)),
            "output" => cli.output = Some(PathBuf::from(value)),
            "resume" => cli.resume = Some(PathBuf::from(value)),
            "force" => {
                cli.force = value
                    .parse()
                    .map_err(|_| Error::Usage(format!("--force takes true/false, got {value:?}")))?
            }
            _ => overrides.push((key.to_string(), value.to_string())),
        }
    }
    Ok((command.clone(), cli, overrides))
}

fn dispatch(args: &[String]) -> Result<()> {
    let (command, cli, overrides) = parse_args(args)?;
    let cfg = parse_config(cli.config.as_deref(), &overrides)?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(&cfg),
        "train" => cmd_train(&cfg, &cli),
        "infer" => cmd_infer(&cfg, &cli),
        "eval" => cmd_eval(&cfg, &cli),
        other => Err(Error::Usage(format!("unknown command {other:?}\n{USAGE}"))),
    }
}

/// Builds the translator and synthesizer into a fresh store with the
/// initialization stream every training entry point shares.
fn build_models(cfg: &RunConfig) -> Result<(TranslatorModel, SynthesizerModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0x1217));
    let translator = TranslatorModel::new(cfg.translator.clone(), &mut store, &mut rng)?;
    let synth = SynthesizerModel::new(cfg.synth.clone(), &mut store, &mut rng)?;
    Ok((translator, synth, store))
}

fn check_fingerprint(ck: &Checkpoint, corpus_dir: &Path, force: bool) -> Result<()> {
    let current = corpus_fingerprint(corpus_dir)?;
    if ck.corpus_fingerprint != current && !force {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on a different corpus \
             ({} vs {current}); pass --force=true to override",
            ck.corpus_fingerprint
        )));
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let meta = generate_corpus(&cfg.corpus, &cfg.corpus_dir)?;
    println!(
        "wrote {} utterances ({} train / {} eval) to {}",
        cfg.corpus.size,
        meta.train.len(),
        meta.eval.len(),
        cfg.corpus_dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, cli: &CliFlags) -> Result<()> {
    let corpus = load_corpus(&cfg.corpus_dir)?;
    cfg.validate_with_corpus(&corpus.meta.gen)?;
    let fingerprint = corpus_fingerprint(&cfg.corpus_dir)?;
    let (translator, synth, mut store) = build_models(cfg)?;
    let resume = match &cli.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_fingerprint(&ck, &cfg.corpus_dir, cli.force)?;
            Some(ck)
        }
        None => None,
    };
    let outcome = train_loop(
        &corpus,
        &corpus.meta.train,
        &translator,
        &synth,
        &mut store,
        &cfg.train,
        &cfg.run_dir,
        serde_json::to_value(cfg)?,
        fingerprint,
        resume.as_ref(),
    )?;
    match (&outcome.first_loss, &outcome.last_loss) {
        (Some(first), Some(last)) => println!(
            "trained to step {} (loss {} -> {}); final checkpoint {}",
            outcome.final_step,
            first.l_total,
            last.l_total,
            outcome.final_checkpoint.display()
        ),
        _ => println!(
            "no steps to run; wrote initial checkpoint {}",
            outcome.final_checkpoint.display()
        ),
    }
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, cli: &CliFlags) -> Result<()> {
    let ckpt_path = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("infer requires --checkpoint=PATH".into()))?;
    let input_path = cli
        .input
        .as_ref()
        .ok_or_else(|| Error::Usage("infer requires --input=PATH".into()))?;
    let (translator, synth, mut store) = build_models(cfg)?;
    let ck = Checkpoint::load(ckpt_path)?;
    ck.restore_params(&mut store)?;
    let input = Container::read(input_path)?;
    let f_src = input.tensor("f_src")?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1F5E));
    let inference = translator.infer(&store, f_src, &mut rng, true)?;
    let mut tape = Tape::new();
    let fine = tape.constant(&inference.fine);
    let synth_out = synth.forward(&mut tape, &store, fine, &mut rng, false, None)?;
    let mel = tape.to_tensor(synth_out.prediction);

    let mut meta = serde_json::json!({
        "kind": "inference",
        "input": input_path.display().to_string(),
        "steps": inference.fine.rows(),
        "cap_hit": inference.cap_hit,
    });
    // decode to tokens when the corpus codebooks are at hand
    if let Ok(corpus) = load_corpus(&cfg.corpus_dir) {
        let tokens = oracle_decode(&mel, &corpus.renderer.mel_codebook, None, 1)?;
        meta["decoded_tokens"] = serde_json::json!(tokens);
    }
    let out_path = cli
        .output
        .clone()
        .unwrap_or_else(|| input_path.with_extension("out.bin"));
    let mut out = Container::new(meta);
    out.push("fine", inference.fine.clone());
    out.push("mel", mel);
    out.push("alignment", inference.alignment.clone());
    out.write(&out_path)?;
    let align_path = out_path.with_extension("alignment.txt");
    std::fs::write(&align_path, alignment_to_text(&inference.alignment))
        .map_err(|e| Error::io(&align_path, e))?;
    println!(
        "decoded {} frames from {} source frames; wrote {} and {}",
        inference.fine.rows(),
        f_src.rows(),
        out_path.display(),
        align_path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, cli: &CliFlags) -> Result<()> {
    let ckpt_path = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("eval requires --checkpoint=PATH".into()))?;
    let corpus = load_corpus(&cfg.corpus_dir)?;
    cfg.validate_with_corpus(&corpus.meta.gen)?;
    let (translator, synth, mut store) = build_models(cfg)?;
    let ck = Checkpoint::load(ckpt_path)?;
    check_fingerprint(&ck, &cfg.corpus_dir, cli.force)?;
    ck.restore_params(&mut store)?;
    if corpus.meta.eval.is_empty() {
        return Err(Error::Contract("this corpus has no eval split".into()));
    }
    let report = run_evaluation(
        &corpus,
        &corpus.meta.eval,
        &translator,
        &synth,
        &store,
        cfg.seed,
    )?;
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let report_path = cfg.run_dir.join("eval_report.json");
    let bytes = serde_json::to_vec_pretty(&report)?;
    std::fs::write(&report_path, bytes).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "eval on {} utterances: BLEU {:.4}, feature MSE {:.6}, attention pass {:.2}, \
         cap-hit {:.2}; wrote {}",
        report.utterances,
        report.corpus_bleu,
        report.feature_mse,
        report.attention_pass_rate,
        report.cap_hit_rate,
        report_path.display()
    );
    Ok(())
}
