//! Objective metrics: feature error, corpus BLEU over oracle-decoded tokens,
//! attention diagnostics, and the dataset-size trend experiment.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::numerics::{ParamStore, Tape, Tensor};
use crate::synthesizer::{SynthConfig, SynthesizerModel};
use crate::toycorpus::{derive_seed, oracle_decode, Corpus};
use crate::training::{train_loop, TrainConfig};
use crate::translator::{TranslatorConfig, TranslatorModel};
use crate::{Error, Result};

/// Mean squared error over the overlapping prefix of two sequences (lengths
/// aligned by truncation to the shorter one).
pub fn feature_mse(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    if pred.rows() == 0 || reference.rows() == 0 {
        return Err(Error::Contract("feature_mse needs non-empty sequences".into()));
    }
    if pred.cols() != reference.cols() {
        return Err(Error::dim("feature_mse", &pred.shape, &reference.shape));
    }
    let t = pred.rows().min(reference.rows());
    let d = pred.cols();
    let mut acc = 0.0;
    for r in 0..t {
        for c in 0..d {
            let diff = pred.data[r * d + c] - reference.data[r * d + c];
            acc += diff * diff;
        }
    }
    Ok(acc / (t * d) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus-level BLEU with clipped n-gram counts up to `max_n`, geometric mean
/// of precisions, and brevity penalty exp(1 - ref/hyp) when hyp < ref.
/// Smoothing is add-one, applied only to n-gram orders with zero matches, so
/// exact matches still score exactly 1.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "BLEU needs equal counts: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() || max_n == 0 {
        return Err(Error::Contract("BLEU needs at least one pair and max_n >= 1".into()));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (hyp, reference) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            totals[n - 1] += hyp.len() - n + 1;
            let mut ref_counts: std::collections::HashMap<&[usize], usize> = Default::default();
            if reference.len() >= n {
                for gram in reference.windows(n) {
                    *ref_counts.entry(gram).or_default() += 1;
                }
            }
            let mut hyp_counts: std::collections::HashMap<&[usize], usize> = Default::default();
            for gram in hyp.windows(n) {
                *hyp_counts.entry(gram).or_default() += 1;
            }
            for (gram, count) in hyp_counts {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            if m > 0 {
                m as f64 / t as f64
            } else {
                // add-one smoothing only when no n-gram matched at this order
                1.0 / (t + 1) as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if hyp_len == 0 {
        0.0
    } else {
        let log_mean =
            precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    /// fraction of utterances passing both checks
    pub pass_rate: f64,
    pub monotonicity_rate: f64,
    pub coverage_rate: f64,
}

/// Per-utterance alignment checks: the attention centroid (1-based source
/// position weighted by attention mass) must be non-decreasing within a slack
/// of 0.5 positions, and the final centroid must reach 0.6x the source length.
pub fn attention_diagnostics(alignments: &[Tensor], src_lens: &[usize]) -> AttentionDiagnostics {
    let mut pass = 0usize;
    let mut mono = 0usize;
    let mut cover = 0usize;
    for (a, &len) in alignments.iter().zip(src_lens) {
        let centroids: Vec<f64> = (0..a.rows())
            .map(|t| {
                let row = a.row(t);
                let mass: f64 = row.iter().sum();
                if mass <= 0.0 {
                    0.0
                } else {
                    row.iter()
                        .enumerate()
                        .map(|(j, w)| (j + 1) as f64 * w)
                        .sum::<f64>()
                        / mass
                }
            })
            .collect();
        let monotone = centroids.windows(2).all(|w| w[1] >= w[0] - 0.5);
        let covered = centroids.last().is_some_and(|&c| c >= 0.6 * len as f64);
        mono += monotone as usize;
        cover += covered as usize;
        pass += (monotone && covered) as usize;
    }
    let n = alignments.len().max(1) as f64;
    AttentionDiagnostics {
        pass_rate: pass as f64 / n,
        monotonicity_rate: mono as f64 / n,
        coverage_rate: cover as f64 / n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// absolute BLEU depends on the smoothing variant, so it is named here
    pub smoothing: String,
    pub utterances: usize,
    pub feature_mse: f64,
    pub corpus_bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// mean decoded-token length over reference-token length
    pub mean_length_ratio: f64,
    pub attention_pass_rate: f64,
    pub monotonicity_rate: f64,
    pub coverage_rate: f64,
    pub cap_hit_rate: f64,
}

/// Full held-out evaluation: free-running translation, synthesizer in eval
/// mode on the fine output, oracle decoding of the predicted mel-analog, and
/// BLEU against the deterministic reference translation.
pub fn run_evaluation(
    corpus: &Corpus,
    indices: &[usize],
    translator: &TranslatorModel,
    synth: &SynthesizerModel,
    store: &ParamStore,
    seed: u64,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation requires a non-empty split".into()));
    }
    let mut hyps = Vec::with_capacity(indices.len());
    let mut refs = Vec::with_capacity(indices.len());
    let mut alignments = Vec::with_capacity(indices.len());
    let mut src_lens = Vec::with_capacity(indices.len());
    let mut mse_acc = 0.0;
    let mut len_ratio_acc = 0.0;
    let mut cap_hits = 0usize;
    for (k, &idx) in indices.iter().enumerate() {
        let utt = &corpus.utterances[idx];
        // the prenet keeps dropout active at inference; its stream is derived
        // per utterance so evaluation is reproducible
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE7A1 ^ k as u64));
        let inf = translator.infer(store, &utt.f_src, &mut rng, true)?;
        cap_hits += inf.cap_hit as usize;
        mse_acc += feature_mse(&inf.fine, &utt.f_tgt)?;
        let mut tape = Tape::new();
        let fine = tape.constant(&inf.fine);
        let out = synth.forward(&mut tape, store, fine, &mut rng, false, None)?;
        let mel = tape.to_tensor(out.prediction);
        let decoded = oracle_decode(&mel, &corpus.renderer.mel_codebook, None, 1)?;
        len_ratio_acc += decoded.len() as f64 / utt.target_tokens.len() as f64;
        hyps.push(decoded);
        refs.push(utt.target_tokens.clone());
        alignments.push(inf.alignment);
        src_lens.push(utt.f_src.rows());
    }
    let bleu = corpus_bleu(&hyps, &refs, 4)?;
    let attn = attention_diagnostics(&alignments, &src_lens);
    let n = indices.len() as f64;
    Ok(EvalReport {
        smoothing: "add-one on zero-match n-gram orders only".into(),
        utterances: indices.len(),
        feature_mse: mse_acc / n,
        corpus_bleu: bleu.bleu,
        precisions: bleu.precisions,
        brevity_penalty: bleu.brevity_penalty,
        mean_length_ratio: len_ratio_acc / n,
        attention_pass_rate: attn.pass_rate,
        monotonicity_rate: attn.monotonicity_rate,
        coverage_rate: attn.coverage_rate,
        cap_hit_rate: cap_hits as f64 / n,
    })
}

/// Trains one fresh model per train-split fraction under an identical recipe
/// (same seed, same step budget) and evaluates each on the fixed eval split.
/// Returns (fraction, report) pairs and writes `trend.tsv` under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn dataset_size_experiment(
    corpus: &Corpus,
    fractions: &[f64],
    translator_cfg: &TranslatorConfig,
    synth_cfg: &SynthConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    config_snapshot: Value,
    fingerprint: String,
) -> Result<Vec<(f64, EvalReport)>> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("fractions must be sorted ascending".into()));
    }
    if corpus.meta.eval.is_empty() {
        return Err(Error::Contract("trend experiment needs a non-empty eval split".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Contract(format!("bad corpus fraction {fraction}")));
        }
        let n = ((corpus.meta.train.len() as f64 * fraction).ceil() as usize)
            .clamp(1, corpus.meta.train.len());
        let subset: Vec<usize> = corpus.meta.train[..n].to_vec();
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, 0x1217));
        let translator = TranslatorModel::new(translator_cfg.clone(), &mut store, &mut init_rng)?;
        let synth = SynthesizerModel::new(synth_cfg.clone(), &mut store, &mut init_rng)?;
        let run_dir = out_dir.join(format!("fraction_{:03}", (fraction * 100.0).round() as u32));
        train_loop(
            corpus,
            &subset,
            &translator,
            &synth,
            &mut store,
            train_cfg,
            &run_dir,
            config_snapshot.clone(),
            fingerprint.clone(),
            None,
        )?;
        let report = run_evaluation(
            corpus,
            &corpus.meta.eval,
            &translator,
            &synth,
            &store,
            train_cfg.seed,
        )?;
        results.push((fraction, report));
    }
    let trend_path = out_dir.join("trend.tsv");
    let mut f = std::fs::File::create(&trend_path).map_err(|e| Error::io(&trend_path, e))?;
    writeln!(f, "fraction\ttrain_pairs\tcorpus_bleu\tfeature_mse\tattention_pass_rate")
        .map_err(|e| Error::io(&trend_path, e))?;
    for (fraction, report) in &results {
        let n = ((corpus.meta.train.len() as f64 * fraction).ceil() as usize)
            .clamp(1, corpus.meta.train.len());
        writeln!(
            f,
            "{fraction}\t{n}\t{}\t{}\t{}",
            report.corpus_bleu, report.feature_mse, report.attention_pass_rate
        )
        .map_err(|e| Error::io(&trend_path, e))?;
    }
    Ok(results)
}
