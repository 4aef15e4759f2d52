//! Autoregressive BNF-to-BNF translation decoder: prenet, stacked LSTM cells
//! with mixture-of-Gaussians monotonic attention, frame/stop projections, and
//! a convolutional postnet behind a stop gradient.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::numerics::{
    lstm_cell_step, xavier, LstmCell, LstmCellVars, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Which translator output feeds back as the previous frame during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub lstm_dim: usize,
    pub lstm_layers: usize,
    pub attn_mixtures: usize,
    pub attn_hidden: usize,
    pub attn_sigma_min: f64,
    pub postnet_kernel: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub max_decode_steps: usize,
    pub feedback: Feedback,
}

impl TranslatorConfig {
    /// Full-scale preset: 512-dim features, prenet 256x2, LSTM 256x2,
    /// 8 Gaussian mixtures with a 128-dim attention net, postnet 5x512x5.
    pub fn paper() -> Self {
        TranslatorConfig {
            d_in: 512,
            d_out: 512,
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            lstm_dim: 256,
            lstm_layers: 2,
            attn_mixtures: 8,
            attn_hidden: 128,
            attn_sigma_min: 0.1,
            postnet_kernel: 5,
            postnet_channels: 512,
            postnet_layers: 5,
            max_decode_steps: 1000,
            feedback: Feedback::Coarse,
        }
    }

    /// Desk-scale preset sized for the procedural toy corpus.
    pub fn toy() -> Self {
        TranslatorConfig {
            d_in: 16,
            d_out: 16,
            prenet_dims: vec![64, 64],
            prenet_dropout: 0.5,
            lstm_dim: 64,
            lstm_layers: 2,
            // one mixture: the attention centroid then inherits the per-mean
            // monotonicity guarantee, where mixtures trading weight could
            // still move the centroid backwards
            attn_mixtures: 1,
            attn_hidden: 32,
            attn_sigma_min: 0.1,
            postnet_kernel: 5,
            postnet_channels: 64,
            postnet_layers: 3,
            max_decode_steps: 120,
            feedback: Feedback::Coarse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_in,
            self.d_out,
            self.lstm_dim,
            self.lstm_layers,
            self.attn_mixtures,
            self.attn_hidden,
            self.postnet_channels,
            self.postnet_layers,
            self.max_decode_steps,
        ];
        if dims.iter().any(|&d| d == 0) || self.prenet_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("translator dims must all be >= 1".into()));
        }
        if self.postnet_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "postnet kernel {} must be odd",
                self.postnet_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config("prenet dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

pub struct TranslatorModel {
    pub cfg: TranslatorConfig,
    prenet: Vec<(ParamId, ParamId)>,
    lstm: Vec<LstmCell>,
    attn_w1: ParamId,
    attn_b1: ParamId,
    attn_w2: ParamId,
    attn_b2: ParamId,
    frame_w: ParamId,
    frame_b: ParamId,
    stop_w: ParamId,
    stop_b: ParamId,
    postnet: Vec<(ParamId, ParamId)>,
}

struct TranslatorVars {
    prenet: Vec<(Var, Var)>,
    lstm: Vec<LstmCellVars>,
    attn_w1: Var,
    attn_b1: Var,
    attn_w2: Var,
    attn_b2: Var,
    frame_w: Var,
    frame_b: Var,
    stop_w: Var,
    stop_b: Var,
    postnet: Vec<(Var, Var)>,
}

/// Decoder recurrence carried between steps, all tape-resident.
struct DecoderState {
    h: Vec<Var>,
    c: Vec<Var>,
    mu: Var,
    context: Var,
}

/// Teacher-forced forward outputs, still on the tape for loss construction.
pub struct TranslatorTapeOutput {
    pub coarse: Var,
    pub fine: Var,
    pub stops: Var,
    pub alignment: Var,
    /// Attention means after each step, copied out for monotonicity checks.
    pub mu_trace: Vec<Vec<f64>>,
}

/// Free-running inference outputs, materialized as plain tensors.
pub struct TranslatorInference {
    pub coarse: Tensor,
    pub fine: Tensor,
    pub stops: Vec<f64>,
    pub alignment: Tensor,
    pub mu_trace: Vec<Vec<f64>>,
    pub cap_hit: bool,
}

impl TranslatorModel {
    pub fn new(cfg: TranslatorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut prenet = Vec::new();
        let mut d = cfg.d_out;
        for (i, &dim) in cfg.prenet_dims.iter().enumerate() {
            let w = store.add(&format!("translator.prenet.{i}.w"), xavier(rng, d, dim));
            let b = store.add(&format!("translator.prenet.{i}.b"), Tensor::zeros(vec![dim]));
            prenet.push((w, b));
            d = dim;
        }
        let mut lstm = Vec::new();
        let mut in_dim = d + cfg.d_in;
        for i in 0..cfg.lstm_layers {
            lstm.push(LstmCell::new(
                store,
                &format!("translator.lstm.{i}"),
                in_dim,
                cfg.lstm_dim,
                rng,
            ));
            in_dim = cfg.lstm_dim;
        }
        let k = cfg.attn_mixtures;
        let attn_w1 = store.add(
            "translator.attn.w1",
            xavier(rng, cfg.lstm_dim, cfg.attn_hidden),
        );
        let attn_b1 = store.add("translator.attn.b1", Tensor::zeros(vec![cfg.attn_hidden]));
        let attn_w2 = store.add(
            "translator.attn.w2",
            xavier(rng, cfg.attn_hidden, 3 * k),
        );
        let attn_b2 = store.add("translator.attn.b2", Tensor::zeros(vec![3 * k]));
        let proj_in = cfg.lstm_dim + cfg.d_in;
        let frame_w = store.add("translator.frame.w", xavier(rng, proj_in, cfg.d_out));
        let frame_b = store.add("translator.frame.b", Tensor::zeros(vec![cfg.d_out]));
        let stop_w = store.add("translator.stop.w", xavier(rng, proj_in, 1));
        let stop_b = store.add("translator.stop.b", Tensor::zeros(vec![1]));
        let mut postnet = Vec::new();
        for i in 0..cfg.postnet_layers {
            let cin = if i == 0 { cfg.d_out } else { cfg.postnet_channels };
            let cout = if i + 1 == cfg.postnet_layers {
                cfg.d_out
            } else {
                cfg.postnet_channels
            };
            let mut kernel = xavier(rng, cfg.postnet_kernel * cin, cout);
            kernel.shape = vec![cfg.postnet_kernel, cin, cout];
            let kw = store.add(&format!("translator.postnet.{i}.k"), kernel);
            let kb = store.add(
                &format!("translator.postnet.{i}.b"),
                Tensor::zeros(vec![cout]),
            );
            postnet.push((kw, kb));
        }
        Ok(TranslatorModel {
            cfg,
            prenet,
            lstm,
            attn_w1,
            attn_b1,
            attn_w2,
            attn_b2,
            frame_w,
            frame_b,
            stop_w,
            stop_b,
            postnet,
        })
    }

    fn bind(&self, tape: &mut Tape, store: &ParamStore) -> TranslatorVars {
        TranslatorVars {
            prenet: self
                .prenet
                .iter()
                .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
                .collect(),
            lstm: self.lstm.iter().map(|c| c.bind(tape, store)).collect(),
            attn_w1: tape.param(store, self.attn_w1),
            attn_b1: tape.param(store, self.attn_b1),
            attn_w2: tape.param(store, self.attn_w2),
            attn_b2: tape.param(store, self.attn_b2),
            frame_w: tape.param(store, self.frame_w),
            frame_b: tape.param(store, self.frame_b),
            stop_w: tape.param(store, self.stop_w),
            stop_b: tape.param(store, self.stop_b),
            postnet: self
                .postnet
                .iter()
                .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
                .collect(),
        }
    }

    fn init_state(&self, tape: &mut Tape) -> DecoderState {
        DecoderState {
            h: (0..self.cfg.lstm_layers)
                .map(|_| tape.zeros(vec![1, self.cfg.lstm_dim]))
                .collect(),
            c: (0..self.cfg.lstm_layers)
                .map(|_| tape.zeros(vec![1, self.cfg.lstm_dim]))
                .collect(),
            mu: tape.zeros(vec![1, self.cfg.attn_mixtures]),
            context: tape.zeros(vec![1, self.cfg.d_in]),
        }
    }

    /// One decoder step. Returns (coarse frame [1 x d_out], stop score [1 x 1],
    /// attention weights [1 x T_in]); the state advances in place.
    fn decoder_step(
        &self,
        tape: &mut Tape,
        vars: &TranslatorVars,
        prev_frame: Var,
        state: &mut DecoderState,
        memory: Var,
        t_in: usize,
        rng: &mut impl Rng,
        dropout_on: bool,
    ) -> Result<(Var, Var, Var)> {
        // prenet with dropout kept on in both training and inference; a
        // child stream per step keeps rng consumption step-count independent
        let mut step_rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen());
        let mut h = prev_frame;
        for &(w, b) in &vars.prenet {
            let a = tape.affine(h, w, Some(b))?;
            let t = tape.tanh(a);
            h = tape.dropout(t, self.cfg.prenet_dropout, dropout_on, &mut step_rng)?;
        }
        let mut x = tape.concat_cols(h, state.context)?;
        for (i, cell) in vars.lstm.iter().enumerate() {
            let (nh, nc) = lstm_cell_step(tape, *cell, x, state.h[i], state.c[i])?;
            state.h[i] = nh;
            state.c[i] = nc;
            x = nh;
        }
        let query = x;

        // GMM attention: per-mixture (weight, mean increment, width); softplus
        // keeps the increments non-negative so the means never move backward.
        let k = self.cfg.attn_mixtures;
        let a1 = tape.affine(query, vars.attn_w1, Some(vars.attn_b1))?;
        let a1 = tape.tanh(a1);
        let raw = tape.affine(a1, vars.attn_w2, Some(vars.attn_b2))?;
        let omega_hat = tape.slice_cols(raw, 0, k)?;
        let delta_hat = tape.slice_cols(raw, k, 2 * k)?;
        let sigma_hat = tape.slice_cols(raw, 2 * k, 3 * k)?;
        let omega = tape.softmax_rows(omega_hat);
        let delta = tape.softplus(delta_hat);
        let sigma_sp = tape.softplus(sigma_hat);
        let sigma = tape.add_scalar(sigma_sp, self.cfg.attn_sigma_min);
        let mu = tape.add(state.mu, delta)?;
        let weights = tape.gmm_weights(omega, mu, sigma, t_in)?;
        let context = tape.affine(weights, memory, None)?;
        state.mu = mu;
        state.context = context;

        let out = tape.concat_cols(query, context)?;
        let coarse = tape.affine(out, vars.frame_w, Some(vars.frame_b))?;
        let stop_raw = tape.affine(out, vars.stop_w, Some(vars.stop_b))?;
        let stop = tape.sigmoid(stop_raw);
        Ok((coarse, stop, weights))
    }

    /// Postnet over a coarse sequence. The input is gradient-detached, so the
    /// residual refinement trains the postnet only.
    ///
    /// With a `frame_mask`, every conv layer's output has its padded rows
    /// zeroed: conv biases would otherwise make pad rows nonzero and leak
    /// into valid rows through the next layer's receptive field.
    fn postnet_forward(
        &self,
        tape: &mut Tape,
        vars: &TranslatorVars,
        coarse_seq: Var,
        frame_mask: Option<&[f64]>,
    ) -> Result<Var> {
        let detached = tape.detach(coarse_seq);
        let mut h = detached;
        let last = vars.postnet.len() - 1;
        for (i, &(kw, kb)) in vars.postnet.iter().enumerate() {
            h = tape.conv1d(h, kw, Some(kb))?;
            if i != last {
                h = tape.tanh(h);
            }
            if let Some(mask) = frame_mask {
                let cols = tape.shape(h)[1];
                let mut m = Vec::with_capacity(mask.len() * cols);
                for &f in mask {
                    m.extend(std::iter::repeat(f).take(cols));
                }
                let mv = tape.constant(&Tensor::new(vec![mask.len(), cols], m)?);
                h = tape.mul(h, mv)?;
            }
        }
        tape.add(detached, h)
    }

    /// Applies the postnet to an already-materialized coarse sequence.
    /// Gradient oracles use this to probe the refinement in isolation: the
    /// internal stop-gradient means finite differences of the full pipeline
    /// must hold the coarse input frozen at its baseline values.
    pub fn postnet(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        coarse_seq: Var,
        frame_mask: Option<&[f64]>,
    ) -> Result<Var> {
        let vars = self.bind(tape, store);
        self.postnet_forward(tape, &vars, coarse_seq, frame_mask)
    }

    /// Teacher-forced decode: step t consumes ground-truth frame t-1 (zero
    /// go-frame at t=0) and the output length equals the target length.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_src: &Tensor,
        f_tgt: &Tensor,
        rng: &mut impl Rng,
        dropout_on: bool,
        frame_mask: Option<&[f64]>,
    ) -> Result<TranslatorTapeOutput> {
        if f_src.rows() == 0 || f_tgt.rows() == 0 {
            return Err(Error::Contract(
                "teacher-forced decode requires non-empty source and target".into(),
            ));
        }
        if f_src.cols() != self.cfg.d_in || f_tgt.cols() != self.cfg.d_out {
            return Err(Error::dim(
                "translator_forward",
                &f_src.shape,
                &[self.cfg.d_in, self.cfg.d_out],
            ));
        }
        let t_in = f_src.rows();
        let t_out = f_tgt.rows();
        let vars = self.bind(tape, store);
        let memory = tape.constant(f_src);
        let mut state = self.init_state(tape);
        let mut coarse_frames = Vec::with_capacity(t_out);
        let mut stop_scores = Vec::with_capacity(t_out);
        let mut weight_rows = Vec::with_capacity(t_out);
        let mut mu_trace = Vec::with_capacity(t_out);
        for t in 0..t_out {
            let prev = if t == 0 {
                tape.zeros(vec![1, self.cfg.d_out])
            } else {
                let row = Tensor::new(vec![1, self.cfg.d_out], f_tgt.row(t - 1).to_vec())?;
                tape.constant(&row)
            };
            let (coarse, stop, weights) =
                self.decoder_step(tape, &vars, prev, &mut state, memory, t_in, rng, dropout_on)?;
            mu_trace.push(tape.value(state.mu).to_vec());
            coarse_frames.push(coarse);
            stop_scores.push(stop);
            weight_rows.push(weights);
        }
        let coarse = tape.concat_rows(&coarse_frames)?;
        let stops = tape.concat_rows(&stop_scores)?;
        let alignment = tape.concat_rows(&weight_rows)?;
        // padded coarse rows are zeroed before the postnet so its same-padded
        // convs see exactly what an unpadded decode would
        let postnet_in = match frame_mask {
            Some(mask) => {
                if mask.len() != t_out {
                    return Err(Error::dim("translator mask", &[t_out], &[mask.len()]));
                }
                let d = self.cfg.d_out;
                let mut m = Vec::with_capacity(t_out * d);
                for &f in mask {
                    m.extend(std::iter::repeat(f).take(d));
                }
                let mv = tape.constant(&Tensor::new(vec![t_out, d], m)?);
                tape.mul(coarse, mv)?
            }
            None => coarse,
        };
        let fine = self.postnet_forward(tape, &vars, postnet_in, frame_mask)?;
        Ok(TranslatorTapeOutput {
            coarse,
            fine,
            stops,
            alignment,
            mu_trace,
        })
    }

    /// Free-running decode feeding back the model's own frames; stops when the
    /// stop score exceeds 0.5 or the step cap is reached (reported, not an
    /// error).
    pub fn infer(
        &self,
        store: &ParamStore,
        f_src: &Tensor,
        rng: &mut impl Rng,
        dropout_on: bool,
    ) -> Result<TranslatorInference> {
        if f_src.rows() == 0 {
            return Err(Error::Contract("inference requires a non-empty source".into()));
        }
        let t_in = f_src.rows();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, store);
        let memory = tape.constant(f_src);
        let mut state = self.init_state(&mut tape);
        let mut coarse_frames = Vec::new();
        let mut stop_scores = Vec::new();
        let mut weight_rows = Vec::new();
        let mut mu_trace = Vec::new();
        let mut prev = tape.zeros(vec![1, self.cfg.d_out]);
        let mut cap_hit = false;
        loop {
            let (coarse, stop, weights) = self.decoder_step(
                &mut tape, &vars, prev, &mut state, memory, t_in, rng, dropout_on,
            )?;
            mu_trace.push(tape.value(state.mu).to_vec());
            coarse_frames.push(coarse);
            stop_scores.push(tape.value(stop)[0]);
            weight_rows.push(weights);
            if tape.value(stop)[0] > 0.5 {
                break;
            }
            if coarse_frames.len() >= self.cfg.max_decode_steps {
                cap_hit = true;
                break;
            }
            prev = match self.cfg.feedback {
                Feedback::Coarse => coarse,
                Feedback::Fine => {
                    // postnet is non-causal, so fine feedback uses the prefix
                    // available so far and takes its last row
                    let prefix = tape.concat_rows(&coarse_frames)?;
                    let fine_prefix = self.postnet_forward(&mut tape, &vars, prefix, None)?;
                    let rows = tape.shape(fine_prefix)[0];
                    let t = tape.to_tensor(fine_prefix);
                    let last = Tensor::new(vec![1, self.cfg.d_out], t.row(rows - 1).to_vec())?;
                    tape.constant(&last)
                }
            };
        }
        let coarse_seq = tape.concat_rows(&coarse_frames)?;
        let fine_seq = self.postnet_forward(&mut tape, &vars, coarse_seq, None)?;
        let alignment = tape.concat_rows(&weight_rows)?;
        Ok(TranslatorInference {
            coarse: tape.to_tensor(coarse_seq),
            fine: tape.to_tensor(fine_seq),
            stops: stop_scores,
            alignment: tape.to_tensor(alignment),
            mu_trace,
            cap_hit,
        })
    }
}

/// Plain-text numeric grid for offline alignment plotting: one row per
/// decoder step, space-separated weights.
pub fn alignment_to_text(alignment: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..alignment.rows() {
        let row: Vec<String> = alignment.row(r).iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TranslatorConfig {
        TranslatorConfig {
            d_in: 3,
            d_out: 2,
            prenet_dims: vec![4],
            prenet_dropout: 0.0,
            lstm_dim: 5,
            lstm_layers: 2,
            attn_mixtures: 2,
            attn_hidden: 4,
            attn_sigma_min: 0.1,
            postnet_kernel: 3,
            postnet_channels: 4,
            postnet_layers: 2,
            max_decode_steps: 10,
            feedback: Feedback::Coarse,
        }
    }

    fn tiny_model(seed: u64) -> (TranslatorModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = TranslatorModel::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        (model, store)
    }

    fn rand_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        use rand::Rng as _;
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn paper_preset_matches_table() {
        let cfg = TranslatorConfig::paper();
        assert_eq!(cfg.prenet_dims, vec![256, 256]);
        assert_eq!((cfg.lstm_dim, cfg.lstm_layers), (256, 2));
        assert_eq!((cfg.attn_mixtures, cfg.attn_hidden), (8, 128));
        assert_eq!(
            (cfg.postnet_kernel, cfg.postnet_channels, cfg.postnet_layers),
            (5, 512, 5)
        );
        assert_eq!(cfg.d_out, 512);
    }

    #[test]
    fn even_postnet_kernel_rejected() {
        let mut cfg = tiny_cfg();
        cfg.postnet_kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_params_emit_frame_projection_bias() {
        let (model, mut store) = tiny_model(1);
        zero_all(&mut store);
        let bias = store.lookup("translator.frame.b").unwrap();
        store.get_mut(bias).data.copy_from_slice(&[0.7, -0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f_src = Tensor::zeros(vec![4, 3]);
        let f_tgt = Tensor::zeros(vec![3, 2]);
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, false, None)
            .unwrap();
        for r in 0..3 {
            let row = &tape.value(out.coarse)[r * 2..(r + 1) * 2];
            assert!((row[0] - 0.7).abs() < 1e-12 && (row[1] + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_stop_bias_forces_stop() {
        let (model, mut store) = tiny_model(2);
        zero_all(&mut store);
        let bias = store.lookup("translator.stop.b").unwrap();
        store.get_mut(bias).data[0] = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f_src = Tensor::zeros(vec![4, 3]);
        let out = model.infer(&store, &f_src, &mut rng, false).unwrap();
        assert_eq!(out.coarse.rows(), 1);
        assert!(out.stops[0] > 0.999);
        assert!(!out.cap_hit);
    }

    #[test]
    fn suppressed_stop_hits_decode_cap() {
        let (model, mut store) = tiny_model(3);
        zero_all(&mut store);
        let bias = store.lookup("translator.stop.b").unwrap();
        store.get_mut(bias).data[0] = -20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f_src = Tensor::zeros(vec![4, 3]);
        let out = model.infer(&store, &f_src, &mut rng, false).unwrap();
        assert_eq!(out.coarse.rows(), model.cfg.max_decode_steps);
        assert!(out.cap_hit);
    }

    #[test]
    fn zero_postnet_makes_fine_equal_coarse() {
        let (model, mut store) = tiny_model(4);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".postnet.") {
                store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f_src = rand_seq(&mut rng, 4, 3);
        let f_tgt = rand_seq(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, false, None)
            .unwrap();
        assert_eq!(tape.value(out.fine), tape.value(out.coarse));
    }

    #[test]
    fn stop_gradient_isolates_postnet() {
        let (model, mut store) = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f_src = rand_seq(&mut rng, 4, 3);
        let f_tgt = rand_seq(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, false, None)
            .unwrap();
        let loss = tape.sum_all(out.fine);
        store.zero_grad();
        tape.backward(loss, &mut store).unwrap();
        let upstream = store.grad_norm_where(|n| !n.contains(".postnet."));
        let postnet = store.grad_norm_where(|n| n.contains(".postnet."));
        assert_eq!(upstream, 0.0);
        assert!(postnet > 0.0);
    }

    #[test]
    fn attention_means_monotone_over_random_steps() {
        let (model, store) = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f_src = rand_seq(&mut rng, 7, 3);
        let f_tgt = rand_seq(&mut rng, 12, 2);
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, false, None)
            .unwrap();
        for w in out.mu_trace.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(b >= a, "attention mean moved backward: {a} -> {b}");
            }
        }
        assert!(out.mu_trace[0].iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn huge_negative_delta_leaves_means_in_place() {
        let (model, mut store) = tiny_model(7);
        zero_all(&mut store);
        let k = model.cfg.attn_mixtures;
        let b2 = store.lookup("translator.attn.b2").unwrap();
        for i in k..2 * k {
            store.get_mut(b2).data[i] = -1000.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f_src = Tensor::zeros(vec![5, 3]);
        let f_tgt = Tensor::zeros(vec![4, 2]);
        let mut tape = Tape::new();
        let out = model
            .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, false, None)
            .unwrap();
        for mus in &out.mu_trace {
            assert!(mus.iter().all(|&m| m.abs() < 1e-6));
        }
    }

    #[test]
    fn narrow_gaussian_concentrates_mass() {
        let mut tape = Tape::new();
        let omega = tape.constant(&Tensor::vector(vec![1.0]));
        let mu = tape.constant(&Tensor::vector(vec![2.0]));
        let sigma = tape.constant(&Tensor::vector(vec![0.1]));
        let w = tape.gmm_weights(omega, mu, sigma, 5).unwrap();
        let vals = tape.value(w);
        let total: f64 = vals.iter().sum();
        assert!(vals[2] / total > 0.99);
    }

    #[test]
    fn teacher_forced_length_and_determinism() {
        let (model, store) = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f_src = rand_seq(&mut rng, 5, 3);
        let f_tgt = rand_seq(&mut rng, 3, 2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape = Tape::new();
            let out = model
                .forward_teacher_forced(&mut tape, &store, &f_src, &f_tgt, &mut rng, true, None)
                .unwrap();
            (
                tape.value(out.fine).to_vec(),
                tape.shape(out.coarse).to_vec(),
                tape.shape(out.alignment).to_vec(),
            )
        };
        let (a, cs, als) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(cs, vec![3, 2]);
        assert_eq!(als, vec![3, 5]);
    }

    #[test]
    fn empty_input_is_contract_error() {
        let (model, store) = tiny_model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = Tensor::zeros(vec![0, 3]);
        let tgt = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        assert!(model
            .forward_teacher_forced(&mut tape, &store, &empty, &tgt, &mut rng, false, None)
            .is_err());
        assert!(model.infer(&store, &empty, &mut rng, false).is_err());
    }

    #[test]
    fn gradcheck_full_translator_sum_of_coarse() {
        let (model, mut store) = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let f_src = rand_seq(&mut rng, 4, 3);
        let f_tgt = rand_seq(&mut rng, 3, 2);

        let forward = |store: &ParamStore| -> (Tape, Var) {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let out = model
                .forward_teacher_forced(&mut tape, store, &f_src, &f_tgt, &mut rng, false, None)
                .unwrap();
            let sq = tape.mul(out.coarse, out.coarse).unwrap();
            let loss = tape.sum_all(sq);
            (tape, loss)
        };

        store.zero_grad();
        let (tape, loss) = forward(&store);
        tape.backward(loss, &mut store).unwrap();
        let numeric = finite_difference_gradient(&mut store.clone(), 1e-5, &mut |s| {
            let (tape, loss) = forward(s);
            tape.scalar(loss)
        })
        .unwrap();
        // relative criterion, with an absolute escape hatch where the
        // central-difference estimate bottoms out in cancellation noise
        for (id, num) in store.ids().zip(&numeric) {
            let ana = store.get(id).grad.as_ref().unwrap();
            for (&a, &n) in ana.iter().zip(num) {
                if (a - n).abs() < 1e-10 {
                    continue;
                }
                let rel = (a - n).abs() / a.abs().max(n.abs());
                assert!(rel < 1e-4, "{}: analytic {a} vs numeric {n}", store.name(id));
            }
        }
    }

    #[test]
    fn alignment_text_grid_shape() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let text = alignment_to_text(&t);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap().split(' ').count(), 3);
    }
}
