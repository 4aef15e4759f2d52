//! Procedurally generated parallel corpus of continuous feature sequences.
//!
//! A small token language with three systematic divergences — token
//! substitution, marked-pair reordering, and one-to-two expansion — is
//! rendered into smooth, noisy frame sequences. Rendering is constructed to be
//! exactly invertible by nearest-neighbor decoding, which gives a decoding
//! oracle for BLEU-style evaluation without any audio or text models.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Mixes a base seed with a stream label so derived generators are
/// independent of each other and of draw order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The translation rule set: a bijective substitution over the vocabulary,
/// three marked source-token pairs that swap when adjacent, and three source
/// tokens whose substituted form expands into a two-token group.
///
/// The last two vocabulary entries are boundary tokens: every sentence opens
/// with `initial_token` and closes with `final_token` (the toy analog of
/// utterance-initial and utterance-final silence). Both are substitution
/// fixed points and excluded from content sampling and from the swap and
/// expansion rules, so they pass through translation unchanged. They give
/// the decoder a deterministic warm-up segment before content starts and a
/// deterministic landing segment that anchors attention at the source end
/// while the stop predictor finishes the utterance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ToyLanguageSpec {
    pub vocab_size: usize,
    /// substitution[s] = target token for source token s (a permutation)
    pub substitution: Vec<usize>,
    /// ordered source-token pairs (a, b): when a is immediately followed by b
    /// in the source, their substituted tokens swap position
    pub swap_pairs: Vec<(usize, usize)>,
    /// (source token e, companion target token): after substitution and
    /// swapping, each occurrence of substitution[e] is followed by the
    /// companion token
    pub expansions: Vec<(usize, usize)>,
    pub sentence_len: (usize, usize),
    pub duration: (usize, usize),
    /// fixed frames-per-token on the target side, one entry per vocabulary
    /// token, each within the duration range. Deterministic timing makes the
    /// end of the target sequence exactly predictable, so a stop predictor
    /// trained with MSE can cross the 0.5 threshold; random per-instance
    /// durations would cap its best final-frame score at the hazard rate
    /// (1/3 or 1/2 for the 2-4 range), which never stops a decode.
    pub target_durations: Vec<usize>,
}

impl ToyLanguageSpec {
    /// Draws a rule set for a 24-token vocabulary: the swap-pair and
    /// expansion token sets are disjoint so the three rules compose without
    /// ambiguity.
    pub fn sample(vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < 16 {
            return Err(Error::Config(
                "toy language needs a vocabulary of at least 16 tokens".into(),
            ));
        }
        let content = vocab_size - 2;
        let mut substitution: Vec<usize> = (0..content).collect();
        substitution.shuffle(rng);
        substitution.extend([content, content + 1]); // boundary fixed points
        let mut marked: Vec<usize> = (0..content).collect();
        marked.shuffle(rng);
        let swap_pairs = vec![
            (marked[0], marked[1]),
            (marked[2], marked[3]),
            (marked[4], marked[5]),
        ];
        // companion must differ from the substituted token it follows, or the
        // expansion output would collapse under run-length decoding
        let mut expansions = Vec::with_capacity(3);
        let mut companion_pool = marked[9..].iter().copied();
        for &e in &marked[6..9] {
            let c = companion_pool
                .find(|&c| c != substitution[e])
                .expect("vocabulary large enough for distinct companions");
            expansions.push((e, c));
        }
        let duration = (2, 4);
        // drawn from the upper half of the range: two-frame target runs are
        // cheap for a free-running decoder to skip outright, which shows up
        // as deletions and a brevity penalty at evaluation
        let target_durations = (0..vocab_size)
            .map(|_| rng.gen_range(duration.0.max(duration.1 - 1)..=duration.1))
            .collect();
        Ok(ToyLanguageSpec {
            vocab_size,
            substitution,
            swap_pairs,
            expansions,
            sentence_len: (3, 10),
            duration,
            target_durations,
        })
    }

    /// Sentence-initial boundary token.
    pub fn initial_token(&self) -> usize {
        self.vocab_size - 2
    }

    /// Sentence-final boundary token.
    pub fn final_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        let mut seen = vec![false; v];
        if self.substitution.len() != v {
            return Err(Error::Config("substitution map must cover the vocabulary".into()));
        }
        for &t in &self.substitution {
            if t >= v || seen[t] {
                return Err(Error::Config("substitution map must be a bijection".into()));
            }
            seen[t] = true;
        }
        let content = v - 2;
        for b in [self.initial_token(), self.final_token()] {
            if self.substitution[b] != b {
                return Err(Error::Config(
                    "boundary tokens must be substitution fixed points".into(),
                ));
            }
        }
        let mut rule_tokens = vec![false; v];
        for &(a, b) in &self.swap_pairs {
            for tok in [a, b] {
                if tok >= content || rule_tokens[tok] {
                    return Err(Error::Config("swap pairs must use distinct content tokens".into()));
                }
                rule_tokens[tok] = true;
            }
        }
        for &(e, c) in &self.expansions {
            if e >= content || c >= content || rule_tokens[e] {
                return Err(Error::Config(
                    "expansion tokens must be content tokens disjoint from swap pairs".into(),
                ));
            }
            rule_tokens[e] = true;
        }
        if self.sentence_len.0 < 1 || self.sentence_len.0 > self.sentence_len.1 {
            return Err(Error::Config("bad sentence length range".into()));
        }
        if self.duration.0 < 2 || self.duration.0 > self.duration.1 {
            return Err(Error::Config(
                "token durations must be at least 2 frames (smoothing invertibility)".into(),
            ));
        }
        if self.target_durations.len() != v
            || self
                .target_durations
                .iter()
                .any(|&d| d < self.duration.0 || d > self.duration.1)
        {
            return Err(Error::Config(
                "target durations must assign every token a value in the duration range".into(),
            ));
        }
        Ok(())
    }
}

/// Samples a source sentence: uniform tokens, uniform length in range.
///
/// Run-length decoding cannot represent adjacent repeats, so candidates are
/// redrawn until neither the source nor its translation contains one.
pub fn sample_source_sentence(spec: &ToyLanguageSpec, rng: &mut impl Rng) -> Vec<usize> {
    let content = spec.vocab_size - 2;
    loop {
        // sentence_len bounds the content tokens; the boundary tokens are
        // added on top of that
        let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
        let mut src = Vec::with_capacity(len + 2);
        src.push(spec.initial_token());
        for _ in 0..len {
            let mut tok = rng.gen_range(0..content);
            while src.last() == Some(&tok) {
                tok = rng.gen_range(0..content);
            }
            src.push(tok);
        }
        src.push(spec.final_token());
        let tgt = translate_tokens(&src, spec).expect("sampled tokens are in vocab");
        if tgt.windows(2).all(|w| w[0] != w[1]) {
            return src;
        }
    }
}

/// Deterministic toy translation: substitute every token, swap each marked
/// adjacent pair (left to right, non-overlapping), then expand designated
/// tokens into two-token groups.
pub fn translate_tokens(src: &[usize], spec: &ToyLanguageSpec) -> Result<Vec<usize>> {
    for &s in src {
        if s >= spec.vocab_size {
            return Err(Error::Contract(format!("token {s} is out of vocabulary")));
        }
    }
    // carry (source, substituted) through the swap so expansion can key on
    // the source token after reordering
    let mut seq: Vec<(usize, usize)> = src.iter().map(|&s| (s, spec.substitution[s])).collect();
    let mut i = 0;
    while i + 1 < seq.len() {
        if spec.swap_pairs.contains(&(seq[i].0, seq[i + 1].0)) {
            seq.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(seq.len());
    for (s, t) in seq {
        out.push(t);
        if let Some(&(_, c)) = spec.expansions.iter().find(|&&(e, _)| e == s) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Samples one frame duration per token; used on the source side, where
/// per-instance variability stands in for speaking-rate differences.
pub fn sample_durations(spec: &ToyLanguageSpec, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n)
        .map(|_| rng.gen_range(spec.duration.0..=spec.duration.1))
        .collect()
}

/// The fixed target-side duration of each token in the sequence.
pub fn target_durations(spec: &ToyLanguageSpec, tokens: &[usize]) -> Vec<usize> {
    tokens.iter().map(|&t| spec.target_durations[t]).collect()
}

/// One speaker's affine view of the source features: an orthogonal rotation
/// close to the identity plus a small bias. Information-preserving, so
/// decoding stays exact after inversion.
///
/// The rotation is kept near the identity on purpose: speakers are views of
/// the *same* phonetic content, so a token's rendering must stay in the same
/// neighborhood across speakers. With unconstrained rotations the task
/// degenerates into learning eight unrelated codebooks, which is speaker
/// separation, not translation.
#[derive(Debug, Clone)]
pub struct SpeakerTransform {
    /// [d x d], orthogonal
    pub q: Tensor,
    /// [d]
    pub bias: Tensor,
}

/// Scale of the random perturbation that tilts each speaker's rotation away
/// from the identity, and of the per-speaker bias.
const SPEAKER_TILT: f64 = 0.12;
const SPEAKER_BIAS: f64 = 0.05;

impl SpeakerTransform {
    fn sample(d: usize, rng: &mut impl Rng) -> Self {
        // Gram-Schmidt on I + tilt*G: orthogonal, but close to the identity
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        while rows.len() < d {
            let k = rows.len();
            let mut v: Vec<f64> = (0..d)
                .map(|i| f64::from(u8::from(i == k)) + SPEAKER_TILT * gaussian(rng))
                .collect();
            for u in &rows {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        let q = Tensor::new(vec![d, d], rows.concat()).expect("orthogonal matrix shape");
        let bias = Tensor::vector((0..d).map(|_| SPEAKER_BIAS * gaussian(rng)).collect());
        SpeakerTransform { q, bias }
    }

    /// f -> Q f + bias, applied per frame.
    pub fn apply(&self, frames: &mut Tensor) {
        let d = self.bias.numel();
        for r in 0..frames.rows() {
            let row = frames.row(r).to_vec();
            for i in 0..d {
                let mut acc = self.bias.data[i];
                for j in 0..d {
                    acc += self.q.data[i * d + j] * row[j];
                }
                frames.data[r * d + i] = acc;
            }
        }
    }

    /// Inverse view: Q^T (f - bias).
    pub fn invert(&self, frames: &mut Tensor) {
        let d = self.bias.numel();
        for r in 0..frames.rows() {
            let row: Vec<f64> = frames
                .row(r)
                .iter()
                .zip(&self.bias.data)
                .map(|(f, b)| f - b)
                .collect();
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.q.data[j * d + i] * row[j];
                }
                frames.data[r * d + i] = acc;
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders token sequences into frame sequences and holds everything the
/// decoding oracle needs to invert them.
#[derive(Debug, Clone)]
pub struct FeatureRenderer {
    pub d_bnf: usize,
    pub d_mel: usize,
    pub smoothing_width: usize,
    pub noise_level: f64,
    /// per-frame noise norm cap; kept below half the constructed
    /// smoothed-boundary margin so noise can never flip a nearest-neighbor
    /// decision
    pub noise_clamp: f64,
    pub upsample_factor: usize,
    /// [V x d_bnf], unit rows
    pub bnf_codebook: Tensor,
    /// [V x d_mel], unit rows
    pub mel_codebook: Tensor,
    pub speakers: Vec<SpeakerTransform>,
}

/// Minimum margin (nearest-competitor distance minus own distance) required
/// at every smoothed token boundary, per codebook.
const BNF_BOUNDARY_MARGIN: f64 = 0.35;
const MEL_BOUNDARY_MARGIN: f64 = 0.15;

impl FeatureRenderer {
    pub fn sample(
        vocab_size: usize,
        d_bnf: usize,
        d_mel: usize,
        n_speakers: usize,
        noise_level: f64,
        upsample_factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bnf_codebook = sample_codebook(vocab_size, d_bnf, BNF_BOUNDARY_MARGIN, rng)?;
        let mel_codebook = sample_codebook(vocab_size, d_mel, MEL_BOUNDARY_MARGIN, rng)?;
        let speakers = (0..n_speakers)
            .map(|_| SpeakerTransform::sample(d_bnf, rng))
            .collect();
        Ok(FeatureRenderer {
            d_bnf,
            d_mel,
            smoothing_width: 3,
            noise_level,
            noise_clamp: BNF_BOUNDARY_MARGIN / 2.0 - 0.01,
            upsample_factor,
            bnf_codebook,
            mel_codebook,
            speakers,
        })
    }

    /// Repeat, smooth, add bounded noise, then apply the speaker view.
    pub fn render_bnf(
        &self,
        tokens: &[usize],
        durations: &[usize],
        speaker: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let mut frames = repeat_rows(&self.bnf_codebook, tokens, durations, 1)?;
        smooth(&mut frames, self.smoothing_width);
        if self.noise_level > 0.0 {
            add_bounded_noise(&mut frames, self.noise_level, self.noise_clamp, rng);
        }
        if let Some(s) = speaker {
            let t = self
                .speakers
                .get(s)
                .ok_or_else(|| Error::Contract(format!("unknown speaker {s}")))?;
            t.apply(&mut frames);
        }
        Ok(frames)
    }

    /// Clean target-side rendering at `upsample_factor` times the frame rate:
    /// no noise, no speaker view.
    pub fn render_mel(&self, tokens: &[usize], durations: &[usize]) -> Result<Tensor> {
        let mut frames = repeat_rows(&self.mel_codebook, tokens, durations, self.upsample_factor)?;
        smooth(&mut frames, self.smoothing_width);
        Ok(frames)
    }
}

fn repeat_rows(
    codebook: &Tensor,
    tokens: &[usize],
    durations: &[usize],
    scale: usize,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot render an empty token sequence".into()));
    }
    if tokens.len() != durations.len() {
        return Err(Error::dim("render durations", &[tokens.len()], &[durations.len()]));
    }
    let d = codebook.cols();
    let total: usize = durations.iter().map(|&x| x * scale).sum();
    let mut data = Vec::with_capacity(total * d);
    for (&tok, &dur) in tokens.iter().zip(durations) {
        if tok >= codebook.rows() {
            return Err(Error::Contract(format!("token {tok} is out of vocabulary")));
        }
        for _ in 0..dur * scale {
            data.extend_from_slice(codebook.row(tok));
        }
    }
    Tensor::new(vec![total, d], data)
}

/// Edge-clamped moving average along the frame axis.
fn smooth(frames: &mut Tensor, width: usize) {
    if width <= 1 {
        return;
    }
    let (t, d) = (frames.rows(), frames.cols());
    let half = width / 2;
    let src = frames.data.clone();
    for r in 0..t {
        for c in 0..d {
            let mut acc = 0.0;
            for k in 0..width {
                let idx = (r + k).saturating_sub(half).min(t - 1);
                acc += src[idx * d + c];
            }
            frames.data[r * d + c] = acc / width as f64;
        }
    }
}

fn add_bounded_noise(frames: &mut Tensor, level: f64, clamp: f64, rng: &mut impl Rng) {
    let (t, d) = (frames.rows(), frames.cols());
    for r in 0..t {
        let mut noise: Vec<f64> = (0..d).map(|_| level * gaussian(rng)).collect();
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > clamp {
            let s = clamp / norm;
            noise.iter_mut().for_each(|x| *x *= s);
        }
        for c in 0..d {
            frames.data[r * d + c] += noise[c];
        }
    }
}

/// Builds a unit-row codebook with (a) min pairwise row distance >= 0.5 and
/// (b) at every smoothed boundary frame v = (2a + b)/3, the true row a beats
/// every competitor by at least `margin`. (b) makes nearest-neighbor decoding
/// of smoothed sequences exact by construction, and per-frame noise bounded
/// below margin/2 provably cannot flip a decision.
///
/// Random unit rows do not reach such margins; the rows are spread with
/// inverse-square repulsion on the sphere (a Thomson-problem relaxation),
/// then the margins are verified explicitly.
fn sample_codebook(v: usize, d: usize, margin: f64, rng: &mut impl Rng) -> Result<Tensor> {
    const ATTEMPTS: usize = 20;
    const ITERS: usize = 3000;
    const STEP: f64 = 0.01;
    for _ in 0..ATTEMPTS {
        let mut rows: Vec<Vec<f64>> = (0..v)
            .map(|_| {
                let mut row: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                row.iter_mut().for_each(|x| *x /= norm);
                row
            })
            .collect();
        for _ in 0..ITERS {
            let mut forces = vec![vec![0.0; d]; v];
            for i in 0..v {
                for j in 0..v {
                    if i == j {
                        continue;
                    }
                    let dij = dist(&rows[i], &rows[j]).max(1e-9);
                    let scale = 1.0 / (dij * dij * dij);
                    for k in 0..d {
                        forces[i][k] += scale * (rows[i][k] - rows[j][k]);
                    }
                }
            }
            for i in 0..v {
                for k in 0..d {
                    rows[i][k] += STEP * forces[i][k];
                }
                let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                rows[i].iter_mut().for_each(|x| *x /= norm);
            }
        }
        if codebook_ok(&rows, margin) {
            return Tensor::new(vec![v, d], rows.concat());
        }
    }
    Err(Error::Numeric(format!(
        "could not build a {v}x{d} codebook with boundary margin {margin}"
    )))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn codebook_ok(rows: &[Vec<f64>], margin: f64) -> bool {
    let v = rows.len();
    for i in 0..v {
        for j in i + 1..v {
            if dist(&rows[i], &rows[j]) < 0.5 {
                return false;
            }
        }
    }
    // boundary frames: v = (2a + b)/3 for every ordered pair
    for a in 0..v {
        for b in 0..v {
            if a == b {
                continue;
            }
            let probe: Vec<f64> = rows[a]
                .iter()
                .zip(&rows[b])
                .map(|(x, y)| (2.0 * x + y) / 3.0)
                .collect();
            let own = dist(&probe, &rows[a]);
            for c in 0..v {
                if c != a && dist(&probe, &rows[c]) < own + margin {
                    return false;
                }
            }
        }
    }
    true
}

/// Nearest-neighbor decode followed by run-length collapse; runs shorter than
/// `min_run` frames are dropped.
pub fn oracle_decode(
    features: &Tensor,
    codebook: &Tensor,
    inverse_speaker: Option<&SpeakerTransform>,
    min_run: usize,
) -> Result<Vec<usize>> {
    if features.rows() == 0 {
        return Err(Error::Contract("cannot decode an empty feature sequence".into()));
    }
    if features.cols() != codebook.cols() {
        return Err(Error::dim("oracle_decode", &features.shape, &codebook.shape));
    }
    let mut work = features.clone();
    if let Some(s) = inverse_speaker {
        s.invert(&mut work);
    }
    let mut labels = Vec::with_capacity(work.rows());
    for r in 0..work.rows() {
        let frame = work.row(r);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..codebook.rows() {
            let d = dist(frame, codebook.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if j - i >= min_run.max(1) {
            out.push(labels[i]);
        }
        i = j;
    }
    Ok(out)
}

/// One corpus record.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub source_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    pub f_src: Tensor,
    pub f_tgt: Tensor,
    pub mel: Tensor,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusGenConfig {
    pub size: usize,
    pub n_speakers: usize,
    pub vocab_size: usize,
    pub d_bnf: usize,
    pub d_mel: usize,
    pub noise_level: f64,
    pub upsample_factor: usize,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        CorpusGenConfig {
            // aims at 2000 training pairs plus a 200-pair held-out split;
            // the split is by sentence identity, so counts are approximate
            size: 2200,
            n_speakers: 8,
            vocab_size: 24,
            d_bnf: 16,
            d_mel: 8,
            noise_level: 0.05,
            upsample_factor: 1,
            eval_fraction: 1.0 / 11.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub gen: CorpusGenConfig,
    pub spec: ToyLanguageSpec,
    /// utterance indices per split; disjoint by sentence identity
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Debug)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub utterances: Vec<UtterancePair>,
    pub renderer: FeatureRenderer,
}

/// Renders utterance `idx` from its own derived random stream, so generation
/// could run in any order and still be bitwise reproducible.
fn render_utterance(
    spec: &ToyLanguageSpec,
    renderer: &FeatureRenderer,
    n_speakers: usize,
    seed: u64,
    idx: usize,
) -> Result<UtterancePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + idx as u64));
    let source_tokens = sample_source_sentence(spec, &mut rng);
    let speaker = rng.gen_range(0..n_speakers);
    let target_tokens = translate_tokens(&source_tokens, spec)?;
    let src_durations = sample_durations(spec, source_tokens.len(), &mut rng);
    let tgt_durations = target_durations(spec, &target_tokens);
    let f_src = renderer.render_bnf(&source_tokens, &src_durations, Some(speaker), &mut rng)?;
    let f_tgt = renderer.render_bnf(&target_tokens, &tgt_durations, None, &mut rng)?;
    let mel = renderer.render_mel(&target_tokens, &tgt_durations)?;
    Ok(UtterancePair {
        source_tokens,
        target_tokens,
        f_src,
        f_tgt,
        mel,
        speaker,
    })
}

fn tokens_to_value(tokens: &[usize]) -> serde_json::Value {
    json!(tokens)
}

/// Generates and writes a complete corpus directory: `meta.json`, a
/// `codebooks.bin` container (codebooks plus speaker transforms), and one
/// container file per utterance. Bitwise reproducible from the seed.
pub fn generate_corpus(cfg: &CorpusGenConfig, dir: &Path) -> Result<CorpusMeta> {
    if cfg.size < 1 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if cfg.n_speakers < 1 {
        return Err(Error::Config("need at least one speaker".into()));
    }
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lang_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let spec = ToyLanguageSpec::sample(cfg.vocab_size, &mut lang_rng)?;
    spec.validate()?;
    let mut render_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let renderer = FeatureRenderer::sample(
        cfg.vocab_size,
        cfg.d_bnf,
        cfg.d_mel,
        cfg.n_speakers,
        cfg.noise_level,
        cfg.upsample_factor,
        &mut render_rng,
    )?;

    let mut utterances = Vec::with_capacity(cfg.size);
    for idx in 0..cfg.size {
        utterances.push(render_utterance(&spec, &renderer, cfg.n_speakers, cfg.seed, idx)?);
    }

    // split by unique sentence identity: an eval sentence never appears in
    // train under any speaker or rendering
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut sentence_split: HashMap<Vec<usize>, bool> = HashMap::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (idx, utt) in utterances.iter().enumerate() {
        let is_eval = *sentence_split
            .entry(utt.source_tokens.clone())
            .or_insert_with(|| split_rng.gen::<f64>() < cfg.eval_fraction);
        if is_eval {
            eval.push(idx);
        } else {
            train.push(idx);
        }
    }
    if train.is_empty() {
        // degenerate corpora must still be trainable
        train = eval.split_off(0);
    }

    let meta = CorpusMeta {
        version: 1,
        gen: cfg.clone(),
        spec,
        train,
        eval,
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta)?;
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, &meta_bytes).map_err(|e| Error::io(&meta_path, e))?;

    let mut codebooks = Container::new(json!({"kind": "codebooks"}));
    codebooks.push("bnf_codebook", renderer.bnf_codebook.clone());
    codebooks.push("mel_codebook", renderer.mel_codebook.clone());
    for (i, s) in renderer.speakers.iter().enumerate() {
        codebooks.push(&format!("speaker.{i}.q"), s.q.clone());
        codebooks.push(&format!("speaker.{i}.bias"), s.bias.clone());
    }
    codebooks.write(&dir.join("codebooks.bin"))?;

    for (idx, utt) in utterances.iter().enumerate() {
        let mut c = Container::new(json!({
            "kind": "utterance",
            "index": idx,
            "speaker": utt.speaker,
            "source_tokens": tokens_to_value(&utt.source_tokens),
            "target_tokens": tokens_to_value(&utt.target_tokens),
        }));
        c.push("f_src", utt.f_src.clone());
        c.push("f_tgt", utt.f_tgt.clone());
        c.push("mel", utt.mel.clone());
        c.write(&dir.join(format!("utt_{idx:05}.bin")))?;
    }
    Ok(meta)
}

fn tokens_from_meta(value: &serde_json::Value, key: &str) -> Result<Vec<usize>> {
    value[key]
        .as_array()
        .ok_or_else(|| Error::Checkpoint(format!("utterance record is missing {key}")))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Checkpoint(format!("non-integer token in {key}")))
        })
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_slice(&meta_bytes)?;
    let codebooks = Container::read(&dir.join("codebooks.bin"))?;
    let mut speakers = Vec::with_capacity(meta.gen.n_speakers);
    for i in 0..meta.gen.n_speakers {
        speakers.push(SpeakerTransform {
            q: codebooks.tensor(&format!("speaker.{i}.q"))?.clone(),
            bias: codebooks.tensor(&format!("speaker.{i}.bias"))?.clone(),
        });
    }
    let renderer = FeatureRenderer {
        d_bnf: meta.gen.d_bnf,
        d_mel: meta.gen.d_mel,
        smoothing_width: 3,
        noise_level: meta.gen.noise_level,
        noise_clamp: BNF_BOUNDARY_MARGIN / 2.0 - 0.01,
        upsample_factor: meta.gen.upsample_factor,
        bnf_codebook: codebooks.tensor("bnf_codebook")?.clone(),
        mel_codebook: codebooks.tensor("mel_codebook")?.clone(),
        speakers,
    };
    let mut utterances = Vec::with_capacity(meta.gen.size);
    for idx in 0..meta.gen.size {
        let c = Container::read(&dir.join(format!("utt_{idx:05}.bin")))?;
        utterances.push(UtterancePair {
            source_tokens: tokens_from_meta(&c.meta, "source_tokens")?,
            target_tokens: tokens_from_meta(&c.meta, "target_tokens")?,
            f_src: c.tensor("f_src")?.clone(),
            f_tgt: c.tensor("f_tgt")?.clone(),
            mel: c.tensor("mel")?.clone(),
            speaker: c.meta["speaker"]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint("utterance record is missing speaker".into()))?
                as usize,
        });
    }
    Ok(Corpus {
        meta,
        utterances,
        renderer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_spec() -> ToyLanguageSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ToyLanguageSpec::sample(24, &mut rng).unwrap()
    }

    /// Independent rule interpreter, deliberately written differently from
    /// `translate_tokens`: positions are resolved first, then emitted.
    fn naive_translate(src: &[usize], spec: &ToyLanguageSpec) -> Vec<usize> {
        let mut order: Vec<usize> = (0..src.len()).collect();
        let mut i = 0;
        while i + 1 < src.len() {
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
    fn pure_substitution_preserves_length() {
        let spec = test_spec();
        // pick tokens not involved in any rule
        let rule_tokens: Vec<usize> = spec
            .swap_pairs
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain(spec.expansions.iter().map(|&(e, _)| e))
            .collect();
        let plain: Vec<usize> = (0..spec.vocab_size)
            .filter(|t| !rule_tokens.contains(t))
            .take(4)
            .collect();
        let out = translate_tokens(&plain, &spec).unwrap();
        assert_eq!(out.len(), plain.len());
        for (s, t) in plain.iter().zip(&out) {
            assert_eq!(spec.substitution[*s], *t);
        }
    }

    #[test]
    fn marked_pair_swaps() {
        let spec = test_spec();
        let (a, b) = spec.swap_pairs[0];
        let out = translate_tokens(&[a, b], &spec).unwrap();
        // swap pairs are disjoint from expansion tokens, so exactly two out
        assert_eq!(out, vec![spec.substitution[b], spec.substitution[a]]);
    }

    #[test]
    fn expansion_lengthens_output() {
        let spec = test_spec();
        let (e, c) = spec.expansions[0];
        let out = translate_tokens(&[e], &spec).unwrap();
        assert_eq!(out, vec![spec.substitution[e], c]);
    }

    #[test]
    fn matches_naive_interpreter_on_random_sentences() {
        let spec = test_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let src = sample_source_sentence(&spec, &mut rng);
            assert_eq!(translate_tokens(&src, &spec).unwrap(), naive_translate(&src, &spec));
        }
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let spec = test_spec();
        assert!(translate_tokens(&[spec.vocab_size], &spec).is_err());
    }

    #[test]
    fn degenerate_length_range_is_exact() {
        let mut spec = test_spec();
        spec.sentence_len = (3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            // 3 content tokens plus the two boundary tokens
            let s = sample_source_sentence(&spec, &mut rng);
            assert_eq!(s.len(), 5);
            assert_eq!(s[0], spec.initial_token());
            assert_eq!(s[4], spec.final_token());
        }
    }

    fn test_renderer(noise: f64) -> FeatureRenderer {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        FeatureRenderer::sample(24, 16, 8, 3, noise, 2, &mut rng).unwrap()
    }

    #[test]
    fn render_decode_round_trip_clean() {
        let spec = test_spec();
        let renderer = test_renderer(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let toks = sample_source_sentence(&spec, &mut rng);
            let durs = sample_durations(&spec, toks.len(), &mut rng);
            let f = renderer.render_bnf(&toks, &durs, None, &mut rng).unwrap();
            assert_eq!(oracle_decode(&f, &renderer.bnf_codebook, None, 1).unwrap(), toks);
            let m = renderer.render_mel(&toks, &durs).unwrap();
            assert_eq!(m.rows(), durs.iter().sum::<usize>() * 2);
            assert_eq!(oracle_decode(&m, &renderer.mel_codebook, None, 1).unwrap(), toks);
        }
    }

    #[test]
    fn render_decode_round_trip_noisy_with_speaker() {
        let spec = test_spec();
        let renderer = test_renderer(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let toks = sample_source_sentence(&spec, &mut rng);
            let durs = sample_durations(&spec, toks.len(), &mut rng);
            let f = renderer.render_bnf(&toks, &durs, Some(1), &mut rng).unwrap();
            let decoded =
                oracle_decode(&f, &renderer.bnf_codebook, Some(&renderer.speakers[1]), 1).unwrap();
            assert_eq!(decoded, toks);
        }
    }

    #[test]
    fn run_length_collapse() {
        let renderer = test_renderer(0.0);
        let cb = &renderer.bnf_codebook;
        let mut data = Vec::new();
        for &t in &[0usize, 0, 1, 1, 1] {
            data.extend_from_slice(cb.row(t));
        }
        let frames = Tensor::new(vec![5, cb.cols()], data).unwrap();
        assert_eq!(oracle_decode(&frames, cb, None, 1).unwrap(), vec![0, 1]);
        // min_run=3 drops the length-2 run
        assert_eq!(oracle_decode(&frames, cb, None, 3).unwrap(), vec![1]);
    }

    #[test]
    fn speaker_transform_is_invertible() {
        let renderer = test_renderer(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = Tensor::new(vec![4, 16], (0..64).map(|_| gaussian(&mut rng)).collect()).unwrap();
        let orig = f.clone();
        renderer.speakers[0].apply(&mut f);
        assert!(f.data.iter().zip(&orig.data).any(|(a, b)| (a - b).abs() > 1e-6));
        renderer.speakers[0].invert(&mut f);
        for (a, b) in f.data.iter().zip(&orig.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn corpus_generation_is_reproducible_and_leak_free() {
        let cfg = CorpusGenConfig {
            size: 40,
            seed: 17,
            ..CorpusGenConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&cfg, d1.path()).unwrap();
        generate_corpus(&cfg, d2.path()).unwrap();
        for name in ["meta.json", "codebooks.bin", "utt_00000.bin", "utt_00039.bin"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identically seeded runs");
        }
        let corpus = load_corpus(d1.path()).unwrap();
        assert_eq!(corpus.utterances.len(), 40);
        let train_sentences: std::collections::HashSet<_> = corpus
            .meta
            .train
            .iter()
            .map(|&i| corpus.utterances[i].source_tokens.clone())
            .collect();
        for &i in &corpus.meta.eval {
            assert!(!train_sentences.contains(&corpus.utterances[i].source_tokens));
        }
        assert_eq!(corpus.meta.train.len() + corpus.meta.eval.len(), 40);
        // loaded records match the rule set
        for utt in &corpus.utterances {
            assert_eq!(
                translate_tokens(&utt.source_tokens, &corpus.meta.spec).unwrap(),
                utt.target_tokens
            );
            assert_eq!(utt.mel.rows(), utt.f_tgt.rows() * cfg.upsample_factor);
        }
    }

    #[test]
    fn single_pair_corpus_goes_to_train() {
        let cfg = CorpusGenConfig {
            size: 1,
            eval_fraction: 0.99,
            seed: 9,
            ..CorpusGenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let meta = generate_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(meta.train.len(), 1);
        assert!(meta.eval.is_empty());
    }
}
