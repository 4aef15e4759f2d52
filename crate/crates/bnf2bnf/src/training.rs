//! Losses, stop-token targets, the two-phase schedule, Adam, and the
//! deterministic training loop.
//!
//! The translator loss is the sum of coarse, fine, and stop-token terms; the
//! synthesizer adds per-block supervision; the total is their sum. Early in
//! training the synthesizer consumes ground-truth target features; from the
//! phase boundary onward it consumes the translator's fine output with
//! gradient flowing back into the translator.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::synthesizer::{masked_mse, synthesizer_loss, SynthesizerModel};
use crate::toycorpus::{derive_seed, Corpus, UtterancePair};
use crate::translator::{TranslatorModel, TranslatorTapeOutput};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// first step of the joint phase; before it the synthesizer trains on
    /// ground-truth features
    pub phase_boundary_step: u64,
    /// when false, translator parameters are frozen during the joint phase
    /// (the synthesizer keeps adapting to the translator's outputs)
    pub teacher_forcing: bool,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let max_steps = 20_000;
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_steps,
            phase_boundary_step: max_steps * 3 / 10,
            teacher_forcing: true,
            seed: 1,
            checkpoint_interval: 4000,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.phase_boundary_step > self.max_steps {
            return Err(Error::Config(
                "phase_boundary_step must be within [0, max_steps]".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must be in [0,1)".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// All loss components of one step. The aggregate fields are recomputed from
/// the component fields in a fixed left-to-right order, so the documented
/// decompositions hold exactly in floating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_coarse: f64,
    pub l_fine: f64,
    pub l_stop: f64,
    pub l_translator: f64,
    pub l_synth_blocks: Vec<f64>,
    pub l_synthesizer: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn from_components(l_coarse: f64, l_fine: f64, l_stop: f64, l_synth_blocks: Vec<f64>) -> Self {
        let l_translator = (l_coarse + l_fine) + l_stop;
        let mut l_synthesizer = l_synth_blocks[0];
        for &b in &l_synth_blocks[1..] {
            l_synthesizer += b;
        }
        let l_total = l_translator + l_synthesizer;
        LossBreakdown {
            l_coarse,
            l_fine,
            l_stop,
            l_translator,
            l_synth_blocks,
            l_synthesizer,
            l_total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite()
    }
}

/// Ground-truth stop sequence for a target of `t_valid` frames padded to
/// `t_padded`: zeros, then 1 at the final valid frame and at every pad frame.
pub fn stop_token_target(t_valid: usize, t_padded: usize) -> Result<Vec<f64>> {
    if t_valid < 1 {
        return Err(Error::Contract("stop target needs at least one frame".into()));
    }
    if t_padded < t_valid {
        return Err(Error::dim("stop_token_target", &[t_valid], &[t_padded]));
    }
    let mut s = vec![0.0; t_padded];
    for v in s.iter_mut().skip(t_valid - 1) {
        *v = 1.0;
    }
    Ok(s)
}

/// Coarse, fine, and stop terms plus their exact sum, all masked to valid
/// frames. The stop target carries 1s at pad frames, but pads are masked out
/// so padding never changes the loss.
pub fn translator_loss(
    tape: &mut Tape,
    out: &TranslatorTapeOutput,
    f_tgt: &Tensor,
    s_tgt: &[f64],
    frame_mask: Option<&[f64]>,
) -> Result<(Var, Var, Var, Var)> {
    let l_coarse = masked_mse(tape, out.coarse, f_tgt, frame_mask)?;
    let l_fine = masked_mse(tape, out.fine, f_tgt, frame_mask)?;
    let stop_target = Tensor::new(vec![s_tgt.len(), 1], s_tgt.to_vec())?;
    let l_stop = masked_mse(tape, out.stops, &stop_target, frame_mask)?;
    let cf = tape.add(l_coarse, l_fine)?;
    let total = tape.add(cf, l_stop)?;
    Ok((total, l_coarse, l_fine, l_stop))
}

/// Adam first/second moments, in parameter-store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect::<Vec<_>>();
        AdamState {
            t: 0,
            m: m.clone(),
            v: m,
        }
    }
}

/// One bias-corrected Adam update over every parameter; missing gradients are
/// treated as zero (moments still decay, keeping resume deterministic).
pub fn adam_update(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        for i in 0..p.numel() {
            let g = p.grad.as_ref().map_or(0.0, |g| g[i]);
            let m = &mut state.m[k][i];
            *m = b1 * *m + (1.0 - b1) * g;
            let v = &mut state.v[k][i];
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// One utterance, zero-padded to the batch's target length.
struct PaddedUtterance<'a> {
    f_src: &'a Tensor,
    f_tgt: Tensor,
    mel: Tensor,
    t_valid: usize,
    mask: Vec<f64>,
    mel_mask: Vec<f64>,
}

fn pad_utterance(utt: &UtterancePair, t_padded: usize, r: usize) -> PaddedUtterance<'_> {
    let t_valid = utt.f_tgt.rows();
    let d = utt.f_tgt.cols();
    let d_mel = utt.mel.cols();
    let mut f_tgt = Tensor::zeros(vec![t_padded, d]);
    f_tgt.data[..t_valid * d].copy_from_slice(&utt.f_tgt.data);
    let mut mel = Tensor::zeros(vec![t_padded * r, d_mel]);
    mel.data[..t_valid * r * d_mel].copy_from_slice(&utt.mel.data);
    let mut mask = vec![1.0; t_valid];
    mask.resize(t_padded, 0.0);
    let mel_mask: Vec<f64> = mask.iter().flat_map(|&v| std::iter::repeat(v).take(r)).collect();
    PaddedUtterance {
        f_src: &utt.f_src,
        f_tgt,
        mel,
        t_valid,
        mask,
        mel_mask,
    }
}

/// Forward pass and loss for one padded utterance on a fresh tape. Returns
/// the scalar loss node plus component values.
#[allow(clippy::too_many_arguments)]
fn utterance_forward(
    tape: &mut Tape,
    store: &ParamStore,
    translator: &TranslatorModel,
    synth: &SynthesizerModel,
    padded: &PaddedUtterance<'_>,
    joint_phase: bool,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<(Var, f64, f64, f64, Vec<f64>)> {
    // independent child streams: the translator draws once per decoder step,
    // which depends on padded length and must not shift the synthesizer's
    // dropout stream
    use rand::Rng as _;
    let mut translator_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut synth_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let out = translator.forward_teacher_forced(
        tape,
        store,
        padded.f_src,
        &padded.f_tgt,
        &mut translator_rng,
        train,
        Some(&padded.mask),
    )?;
    let s_tgt = stop_token_target(padded.t_valid, padded.mask.len())?;
    let (l_trans, lc, lf, ls) = translator_loss(tape, &out, &padded.f_tgt, &s_tgt, Some(&padded.mask))?;
    let synth_in = if joint_phase {
        out.fine
    } else {
        tape.constant(&padded.f_tgt)
    };
    let synth_out = synth.forward(tape, store, synth_in, &mut synth_rng, train, Some(&padded.mel_mask))?;
    let (l_synth, blocks) = synthesizer_loss(tape, &synth_out, &padded.mel, Some(&padded.mel_mask))?;
    let total = tape.add(l_trans, l_synth)?;
    let block_vals: Vec<f64> = blocks.iter().map(|&b| tape.scalar(b)).collect();
    Ok((total, tape.scalar(lc), tape.scalar(lf), tape.scalar(ls), block_vals))
}

/// Per-(seed, step, batch slot) random stream: dropout draws depend only on
/// these three values, so resumed runs replay the identical streams.
fn step_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, 0xA11CE ^ step), 0xB0B ^ slot))
}

/// One optimizer step over a batch of utterances: zero grads, per-utterance
/// forward/backward at weight 1/B, global-norm clip, Adam. Parameters are
/// mutated exactly once.
pub fn train_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    translator: &TranslatorModel,
    synth: &SynthesizerModel,
    batch: &[&UtterancePair],
    step: u64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step on an empty batch".into()));
    }
    let joint_phase = step >= cfg.phase_boundary_step;
    let r = synth.cfg.upsample_factor;
    let t_padded = batch.iter().map(|u| u.f_tgt.rows()).max().unwrap();
    let b = batch.len() as f64;
    let (mut lc_sum, mut lf_sum, mut ls_sum) = (0.0, 0.0, 0.0);
    let mut block_sums = vec![0.0; synth.cfg.n_blocks];
    store.zero_grad();
    for (slot, utt) in batch.iter().enumerate() {
        let padded = pad_utterance(utt, t_padded, r);
        let mut rng = step_rng(cfg.seed, step, slot as u64);
        let mut tape = Tape::new();
        let (total, lc, lf, ls, blocks) = utterance_forward(
            &mut tape, store, translator, synth, &padded, joint_phase, &mut rng, true,
        )?;
        let scaled = tape.scale(total, 1.0 / b);
        if !tape.scalar(scaled).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}, batch slot {slot}: \
                 coarse={lc}, fine={lf}, stop={ls}, blocks={blocks:?}"
            )));
        }
        tape.backward(scaled, store)?;
        lc_sum += lc / b;
        lf_sum += lf / b;
        ls_sum += ls / b;
        for (acc, v) in block_sums.iter_mut().zip(&blocks) {
            *acc += v / b;
        }
    }
    if joint_phase && !cfg.teacher_forcing {
        // frozen-translator variant of the joint phase
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).starts_with("translator.") {
                store.get_mut(id).zero_grad();
            }
        }
    }
    store.clip_grad_global_norm(cfg.grad_clip_norm);
    adam_update(store, adam, cfg);
    Ok(LossBreakdown::from_components(lc_sum, lf_sum, ls_sum, block_sums))
}

/// Deterministic batch plan for one epoch: shuffle, bucket by target length
/// quantized to 8 frames, chunk, then shuffle the batch order. A function of
/// (seed, epoch) only, so any step's batch can be recomputed after a resume.
pub fn batch_schedule(
    indices: &[usize],
    target_len: impl Fn(usize) -> usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5C4ED ^ epoch));
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng);
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for idx in shuffled {
        buckets.entry(target_len(idx).div_ceil(8)).or_default().push(idx);
    }
    let mut batches = Vec::new();
    for bucket in buckets.values() {
        for chunk in bucket.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub first_loss: Option<LossBreakdown>,
    pub last_loss: Option<LossBreakdown>,
    pub final_checkpoint: PathBuf,
}

/// Runs (or resumes) training over the given train-split indices, writing
/// checkpoints and an append-only tab-separated metrics log
/// (step, L_coarse, L_fine, L_stop, L_synth_1..N, L_total, seconds).
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    corpus: &Corpus,
    train_indices: &[usize],
    translator: &TranslatorModel,
    synth: &SynthesizerModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    out_dir: &Path,
    config_snapshot: Value,
    fingerprint: String,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_indices.is_empty() {
        return Err(Error::Contract("training requires a non-empty train split".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut adam = AdamState::new(store);
    let mut start_step = 0u64;
    if let Some(ck) = resume {
        ck.restore_params(store)?;
        let (m, v) = ck.moments_for(store)?;
        adam = AdamState {
            t: ck.adam_t,
            m,
            v,
        };
        start_step = ck.step;
    }

    let log_path = out_dir.join("metrics.tsv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if start_step == 0 {
        let headers: Vec<String> = ["step", "l_coarse", "l_fine", "l_stop"]
            .iter()
            .map(|s| s.to_string())
            .chain((1..=synth.cfg.n_blocks).map(|i| format!("l_synth_{i}")))
            .chain(["l_total".to_string(), "seconds".to_string()])
            .collect();
        writeln!(log, "{}", headers.join("\t")).map_err(|e| Error::io(&log_path, e))?;
    }

    let save = |step: u64, store: &ParamStore, adam: &AdamState| -> Result<PathBuf> {
        let ck = Checkpoint::capture(
            store,
            Some((&adam.m, &adam.v, adam.t)),
            step,
            config_snapshot.clone(),
            fingerprint.clone(),
        );
        let path = out_dir.join(format!("ckpt_{step:06}.ckpt"));
        ck.save(&path)?;
        Ok(path)
    };

    if cfg.max_steps == 0 {
        let path = save(0, store, &adam)?;
        return Ok(TrainOutcome {
            final_step: 0,
            first_loss: None,
            last_loss: None,
            final_checkpoint: path,
        });
    }

    let batches_per_epoch = train_indices.len().div_ceil(cfg.batch_size) as u64;
    let target_len = |idx: usize| corpus.utterances[idx].f_tgt.rows();
    let started = Instant::now();
    let mut cached_epoch = u64::MAX;
    let mut schedule: Vec<Vec<usize>> = Vec::new();
    let mut first_loss = None;
    let mut last_loss = None;
    let mut final_path = None;
    for step in start_step..cfg.max_steps {
        let epoch = step / batches_per_epoch;
        if epoch != cached_epoch {
            schedule = batch_schedule(train_indices, target_len, cfg.batch_size, cfg.seed, epoch);
            cached_epoch = epoch;
        }
        let batch_idx = (step % batches_per_epoch) as usize;
        let batch: Vec<&UtterancePair> = schedule[batch_idx]
            .iter()
            .map(|&i| &corpus.utterances[i])
            .collect();
        let loss = train_step(store, &mut adam, translator, synth, &batch, step, cfg)?;
        let completed = step + 1;
        let mut line = format!("{completed}\t{}\t{}\t{}", loss.l_coarse, loss.l_fine, loss.l_stop);
        for b in &loss.l_synth_blocks {
            line.push_str(&format!("\t{b}"));
        }
        line.push_str(&format!("\t{}\t{:.3}", loss.l_total, started.elapsed().as_secs_f64()));
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if first_loss.is_none() {
            first_loss = Some(loss.clone());
        }
        last_loss = Some(loss);
        if cfg.checkpoint_interval > 0 && completed % cfg.checkpoint_interval == 0 {
            let p = save(completed, store, &adam)?;
            if completed == cfg.max_steps {
                final_path = Some(p);
            }
        }
    }
    let final_checkpoint = match final_path {
        Some(p) => p,
        None => save(cfg.max_steps, store, &adam)?,
    };
    Ok(TrainOutcome {
        final_step: cfg.max_steps,
        first_loss,
        last_loss,
        final_checkpoint,
    })
}
