//! Non-autoregressive feature-to-mel stack: an input projection followed by
//! N light-convolution blocks (GLU gate, depthwise conv, dropout, layer norm,
//! residual), each contributing a mel-dim projection trained against the
//! target.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::numerics::{xavier, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d_in: usize,
    pub d_mel: usize,
    pub glu_kernel: usize,
    pub conv_channels: usize,
    pub dw_kernel: usize,
    pub dw_stride: usize,
    pub dropout_rate: f64,
    pub n_blocks: usize,
    pub upsample_factor: usize,
}

impl SynthConfig {
    /// Full-scale preset: GLU kernel 3 over 512 channels, depthwise kernel 17
    /// stride 1, dropout 0.1, six blocks, 4x frame-rate upsampling.
    pub fn paper() -> Self {
        SynthConfig {
            d_in: 512,
            d_mel: 80,
            glu_kernel: 3,
            conv_channels: 512,
            dw_kernel: 17,
            dw_stride: 1,
            dropout_rate: 0.1,
            n_blocks: 6,
            upsample_factor: 4,
        }
    }

    /// Desk-scale preset matching the toy corpus feature rates (r = 1).
    pub fn toy() -> Self {
        SynthConfig {
            d_in: 16,
            d_mel: 8,
            glu_kernel: 3,
            conv_channels: 48,
            dw_kernel: 9,
            dw_stride: 1,
            dropout_rate: 0.1,
            n_blocks: 2,
            upsample_factor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_mel == 0 || self.conv_channels == 0 || self.n_blocks == 0 {
            return Err(Error::Config("synthesizer dims must all be >= 1".into()));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel {} must be odd",
                self.dw_kernel
            )));
        }
        if self.dw_stride != 1 {
            return Err(Error::Config("depthwise stride must be 1".into()));
        }
        if self.upsample_factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must be in [0,1)".into()));
        }
        Ok(())
    }
}

struct Block {
    glu_k: ParamId,
    glu_b: ParamId,
    dw_k: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    mel_w: ParamId,
    mel_b: ParamId,
}

pub struct SynthesizerModel {
    pub cfg: SynthConfig,
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<Block>,
}

/// All block outputs (after their mel projections) plus the final prediction.
pub struct SynthTapeOutput {
    pub block_outputs: Vec<Var>,
    pub prediction: Var,
}

impl SynthesizerModel {
    pub fn new(cfg: SynthConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.conv_channels;
        let in_w = store.add("synthesizer.in.w", xavier(rng, cfg.d_in, c));
        let in_b = store.add("synthesizer.in.b", Tensor::zeros(vec![c]));
        let mut blocks = Vec::new();
        for i in 0..cfg.n_blocks {
            let mut glu = xavier(rng, cfg.glu_kernel * c, 2 * c);
            glu.shape = vec![cfg.glu_kernel, c, 2 * c];
            let glu_k = store.add(&format!("synthesizer.block.{i}.glu.k"), glu);
            let glu_b = store.add(
                &format!("synthesizer.block.{i}.glu.b"),
                Tensor::zeros(vec![2 * c]),
            );
            let dw_k = store.add(
                &format!("synthesizer.block.{i}.dw.k"),
                xavier(rng, cfg.dw_kernel, c),
            );
            let ln_gain = store.add(
                &format!("synthesizer.block.{i}.ln.gain"),
                Tensor::new(vec![c], vec![1.0; c])?,
            );
            let ln_bias = store.add(
                &format!("synthesizer.block.{i}.ln.bias"),
                Tensor::zeros(vec![c]),
            );
            let mel_w = store.add(
                &format!("synthesizer.block.{i}.mel.w"),
                xavier(rng, c, cfg.d_mel),
            );
            let mel_b = store.add(
                &format!("synthesizer.block.{i}.mel.b"),
                Tensor::zeros(vec![cfg.d_mel]),
            );
            blocks.push(Block {
                glu_k,
                glu_b,
                dw_k,
                ln_gain,
                ln_bias,
                mel_w,
                mel_b,
            });
        }
        Ok(SynthesizerModel {
            cfg,
            in_w,
            in_b,
            blocks,
        })
    }

    /// One light-convolution block over a [T x C] sequence.
    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &Block,
        x: Var,
        rng: &mut impl Rng,
        train: bool,
        mask_mat: Option<Var>,
    ) -> Result<Var> {
        let c = self.cfg.conv_channels;
        let glu_k = tape.param(store, block.glu_k);
        let glu_b = tape.param(store, block.glu_b);
        let dw_k = tape.param(store, block.dw_k);
        let ln_gain = tape.param(store, block.ln_gain);
        let ln_bias = tape.param(store, block.ln_bias);
        let conv = tape.conv1d(x, glu_k, Some(glu_b))?;
        let linear = tape.slice_cols(conv, 0, c)?;
        let gate_raw = tape.slice_cols(conv, c, 2 * c)?;
        let gate = tape.sigmoid(gate_raw);
        let mut gated = tape.mul(linear, gate)?;
        // the GLU bias makes padded rows nonzero; zero them before the
        // depthwise conv so its receptive field matches implicit zero padding
        if let Some(m) = mask_mat {
            gated = tape.mul(gated, m)?;
        }
        let dw = tape.depthwise_conv1d(gated, dw_k)?;
        let dropped = tape.dropout(dw, self.cfg.dropout_rate, train, rng)?;
        let normed = tape.layer_norm(dropped, ln_gain, ln_bias, 1e-5)?;
        tape.add(x, normed)
    }

    /// Runs the full stack in `train` (dropout on) or eval mode. Input frames
    /// are repeated `upsample_factor` times before the blocks.
    ///
    /// `frame_mask` (one 0/1 per upsampled frame) zeroes padded rows between
    /// stages so that appending zero pad frames to a batch reproduces the
    /// convolutions' implicit zero padding exactly.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        rng: &mut impl Rng,
        train: bool,
        frame_mask: Option<&[f64]>,
    ) -> Result<SynthTapeOutput> {
        if tape.shape(features).first().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract("synthesizer input is empty".into()));
        }
        let up = tape.repeat_rows(features, self.cfg.upsample_factor)?;
        let t_mel = tape.shape(up)[0];
        let mask_mat = match frame_mask {
            Some(mask) => {
                if mask.len() != t_mel {
                    return Err(Error::dim("synthesizer mask", &[t_mel], &[mask.len()]));
                }
                let c = self.cfg.conv_channels;
                let mut m = Vec::with_capacity(t_mel * c);
                for &f in mask {
                    m.extend(std::iter::repeat(f).take(c));
                }
                Some(tape.constant(&Tensor::new(vec![t_mel, c], m)?))
            }
            None => None,
        };
        let in_w = tape.param(store, self.in_w);
        let in_b = tape.param(store, self.in_b);
        let mut h = tape.affine(up, in_w, Some(in_b))?;
        if let Some(m) = mask_mat {
            h = tape.mul(h, m)?;
        }
        let mut block_outputs = Vec::with_capacity(self.cfg.n_blocks);
        for block in &self.blocks {
            // fork one child stream per block so rng consumption does not
            // depend on sequence length
            let mut block_rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen());
            h = self.block_forward(tape, store, block, h, &mut block_rng, train, mask_mat)?;
            if let Some(m) = mask_mat {
                h = tape.mul(h, m)?;
            }
            let mel_w = tape.param(store, block.mel_w);
            let mel_b = tape.param(store, block.mel_b);
            block_outputs.push(tape.affine(h, mel_w, Some(mel_b))?);
        }
        let prediction = *block_outputs.last().unwrap();
        Ok(SynthTapeOutput {
            block_outputs,
            prediction,
        })
    }
}

/// L_synth = sum over blocks of the mean-squared error between each block
/// output and the target, over valid (mask = 1) frames. Returns the tape node
/// for the total plus per-block scalars; the total is the exact left-to-right
/// sum of the per-block terms.
pub fn synthesizer_loss(
    tape: &mut Tape,
    output: &SynthTapeOutput,
    target: &Tensor,
    frame_mask: Option<&[f64]>,
) -> Result<(Var, Vec<Var>)> {
    let mut per_block = Vec::with_capacity(output.block_outputs.len());
    for &y in &output.block_outputs {
        per_block.push(masked_mse(tape, y, target, frame_mask)?);
    }
    let mut total = per_block[0];
    for &term in &per_block[1..] {
        total = tape.add(total, term)?;
    }
    Ok((total, per_block))
}

/// Mean-squared error over valid frames and dims; `frame_mask` holds one 0/1
/// entry per frame (all-ones when absent).
pub fn masked_mse(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    frame_mask: Option<&[f64]>,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape {
        return Err(Error::dim("masked_mse", &shape, &target.shape));
    }
    let (t, d) = (target.rows(), target.cols());
    let tv = tape.constant(target);
    let diff = tape.sub(pred, tv)?;
    let sq = tape.mul(diff, diff)?;
    let (summed, valid) = match frame_mask {
        Some(mask) => {
            if mask.len() != t {
                return Err(Error::dim("masked_mse mask", &[t], &[mask.len()]));
            }
            let mut m = Vec::with_capacity(t * d);
            for &f in mask {
                m.extend(std::iter::repeat(f).take(d));
            }
            let mv = tape.constant(&Tensor::new(vec![t, d], m)?);
            let masked = tape.mul(sq, mv)?;
            (tape.sum_all(masked), mask.iter().sum::<f64>() * d as f64)
        }
        None => (tape.sum_all(sq), (t * d) as f64),
    };
    if valid == 0.0 {
        return Err(Error::Contract("masked_mse with no valid frames".into()));
    }
    Ok(tape.scale(summed, 1.0 / valid))
}
