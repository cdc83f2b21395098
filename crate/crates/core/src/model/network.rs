use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{InputMode, LossConfig, ModelConfig};
use super::ops::{self, LnCache};
use super::params::{self, Layout, ParamStore};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence, Waveform};
use crate::masking::MaskSpec;

/// Transformer trained to predict cluster units of masked frames.
#[derive(Debug, Clone)]
pub struct MaskedPredictionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    layout: Layout,
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
}

struct HeadCache {
    proj: Array2<f64>,
    proj_unit: Array2<f64>,
    proj_norm: Array1<f64>,
    code_unit: Array2<f64>,
    code_norm: Array1<f64>,
}

/// Everything a forward pass produces, plus what backward needs.
pub struct Pass {
    /// Hidden states: index 0 is the transformer input, `i` the output of block `i`.
    pub hidden: Vec<Array2<f64>>,
    /// Final-normed encoder output `o_t`.
    pub output: Array2<f64>,
    /// Per head, `T × C_k` logits.
    pub logits: Vec<Array2<f64>>,
    conv_inputs: Vec<Array2<f64>>,
    conv_pre: Vec<Array2<f64>>,
    in_ln: LnCache,
    in_normed: Array2<f64>,
    masked: Vec<bool>,
    pos_pre: Array2<f64>,
    blocks: Vec<Option<BlockCache>>,
    final_ln: LnCache,
    heads: Vec<HeadCache>,
}

/// Masked and unmasked hit counts for one head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeadAccuracy {
    pub masked_correct: usize,
    pub masked_total: usize,
    pub unmasked_correct: usize,
    pub unmasked_total: usize,
}

impl HeadAccuracy {
    pub fn masked(&self) -> f64 {
        ratio(self.masked_correct, self.masked_total)
    }

    pub fn unmasked(&self) -> f64 {
        ratio(self.unmasked_correct, self.unmasked_total)
    }

    pub fn add(&mut self, other: &HeadAccuracy) {
        self.masked_correct += other.masked_correct;
        self.masked_total += other.masked_total;
        self.unmasked_correct += other.unmasked_correct;
        self.unmasked_total += other.unmasked_total;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Negative weighted log-likelihood in nats, summed over frames and heads.
    pub loss: f64,
    /// Sum of the frame weights that contributed.
    pub weight: f64,
    pub accuracy: Vec<HeadAccuracy>,
    /// d loss / d logits per head.
    pub dlogits: Vec<Array2<f64>>,
}

/// Parameter gradients in store order.
pub type Grads = Vec<Array2<f64>>;

impl MaskedPredictionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (layout, params) = params::init(&config, seed)?;
        Ok(Self {
            config,
            params,
            step: 0,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match.
    pub fn from_params(config: ModelConfig, params: ParamStore, step: u64) -> Result<Self> {
        config.validate()?;
        let expected = params::param_shapes(&config);
        if expected.len() != params.names.len() {
            return Err(Error::Shape(format!(
                "config expects {} tensors, got {}",
                expected.len(),
                params.names.len()
            )));
        }
        for ((name, shape), (got, v)) in expected.iter().zip(params.names.iter().zip(&params.values)) {
            if name != got || *shape != v.dim() {
                return Err(Error::Shape(format!(
                    "tensor {got} {:?} does not match expected {name} {shape:?}",
                    v.dim()
                )));
            }
        }
        let layout = params::layout(&config);
        Ok(Self {
            config,
            params,
            step,
            layout,
        })
    }

    fn p(&self, i: usize) -> &Array2<f64> {
        &self.params.values[i]
    }

    pub fn num_heads(&self) -> usize {
        self.config.codebook_sizes.len()
    }

    /// Frames produced for `len` input rows, or an error if too short.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        self.config.num_frames(len).ok_or_else(|| {
            Error::InvalidInput(format!(
                "input of {len} rows is shorter than the receptive field ({})",
                match self.config.input_mode {
                    InputMode::Waveform => self.config.receptive_field(),
                    InputMode::Features => 1,
                }
            ))
        })
    }

    /// Runs the strided convolution stack (waveform mode only).
    pub fn conv_encode(&self, w: &Waveform) -> Result<FeatureSequence> {
        if self.config.input_mode != InputMode::Waveform {
            return Err(Error::Config("conv_encode needs input_mode = waveform".into()));
        }
        let x = waveform_input(w);
        self.num_frames(x.nrows())?;
        let (out, _, _) = self.conv_stack(x);
        FeatureSequence::new(
            out.mapv(|v| v as f32),
            16000 / self.config.total_stride() as u32,
            FeatureKind::EncoderLayer(0),
            w.utterance_id.clone(),
        )
    }

    fn conv_stack(&self, mut x: Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for (c, idx) in self.config.conv.iter().zip(&self.layout.conv) {
            let y = ops::conv1d(&x, self.p(idx.w), self.p(idx.b), c.kernel, c.stride);
            inputs.push(x);
            x = ops::gelu(&y);
            pre.push(y);
        }
        (x, inputs, pre)
    }

    /// Full forward pass. `input` holds feature frames (features mode) or a
    /// single column of samples (waveform mode). With `layerdrop` given,
    /// blocks are skipped at random as in training.
    pub fn forward_pass(
        &self,
        input: ArrayView2<f64>,
        mask: &MaskSpec,
        layerdrop: Option<&mut ChaCha8Rng>,
    ) -> Result<Pass> {
        let cfg = &self.config;
        let expected_cols = match cfg.input_mode {
            InputMode::Features => cfg.input_dim,
            InputMode::Waveform => 1,
        };
        if input.ncols() != expected_cols {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {expected_cols}",
                input.ncols()
            )));
        }
        let t = self.num_frames(input.nrows())?;
        if mask.t != t {
            return Err(Error::Shape(format!("mask covers {} frames, input has {t}", mask.t)));
        }
        let l = &self.layout;
        let (frontend, conv_inputs, conv_pre) = match cfg.input_mode {
            InputMode::Features => (input.to_owned(), Vec::new(), Vec::new()),
            InputMode::Waveform => self.conv_stack(input.to_owned()),
        };
        let (in_normed, in_ln) = ops::layer_norm(frontend.view(), self.p(l.in_ln_g), self.p(l.in_ln_b));
        let mut h0 = ops::linear(in_normed.view(), self.p(l.in_w), self.p(l.in_b));
        let masked = mask.indicator();
        let emb = self.p(l.mask_emb).row(0).to_owned();
        for &i in &mask.masked {
            h0.row_mut(i).assign(&emb);
        }
        check_finite(&h0, 0)?;

        let pos_pre = ops::grouped_conv(
            &h0,
            self.p(l.pos_w),
            self.p(l.pos_b),
            cfg.pos_conv_kernel,
            cfg.pos_conv_groups,
        );
        let mut x = &h0 + &ops::gelu(&pos_pre);
        let mut hidden = vec![h0];
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        let mut drop_rng = layerdrop;
        for (i, bi) in l.blocks.iter().enumerate() {
            let skip = match drop_rng.as_deref_mut() {
                Some(rng) if cfg.layerdrop_prob > 0.0 => rng.random::<f64>() < cfg.layerdrop_prob,
                _ => false,
            };
            if skip {
                blocks.push(None);
                hidden.push(x.clone());
                continue;
            }
            let (a, ln1) = ops::layer_norm(x.view(), self.p(bi.ln1_g), self.p(bi.ln1_b));
            let qkv = ops::linear(a.view(), self.p(bi.qkv_w), self.p(bi.qkv_b));
            let (ctx, probs) = ops::attention(&qkv, cfg.num_heads);
            let x_mid = &x + &ops::linear(ctx.view(), self.p(bi.out_w), self.p(bi.out_b));
            let (b, ln2) = ops::layer_norm(x_mid.view(), self.p(bi.ln2_g), self.p(bi.ln2_b));
            let f_pre = ops::linear(b.view(), self.p(bi.ffn1_w), self.p(bi.ffn1_b));
            let f_act = ops::gelu(&f_pre);
            let x_out = &x_mid + &ops::linear(f_act.view(), self.p(bi.ffn2_w), self.p(bi.ffn2_b));
            check_finite(&x_out, i + 1)?;
            blocks.push(Some(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                ctx,
                ln2,
                b,
                f_pre,
                f_act,
            }));
            x = x_out.clone();
            hidden.push(x_out);
        }
        let (output, final_ln) = ops::layer_norm(x.view(), self.p(l.final_g), self.p(l.final_b));
        let mut heads = Vec::with_capacity(l.heads.len());
        let mut logits = Vec::with_capacity(l.heads.len());
        for hi in &l.heads {
            let proj = output.dot(self.p(hi.proj));
            let (proj_unit, proj_norm) = ops::normalize_rows(&proj);
            let (code_unit, code_norm) = ops::normalize_rows(self.p(hi.codewords));
            logits.push(proj_unit.dot(&code_unit.t()) / cfg.tau);
            heads.push(HeadCache {
                proj,
                proj_unit,
                proj_norm,
                code_unit,
                code_norm,
            });
        }
        Ok(Pass {
            hidden,
            output,
            logits,
            conv_inputs,
            conv_pre,
            in_ln,
            in_normed,
            masked,
            pos_pre,
            blocks,
            final_ln,
            heads,
        })
    }

    /// Eval-mode hidden states `[layer 0, ..., layer N]`.
    pub fn forward(&self, input: ArrayView2<f64>, mask: &MaskSpec) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_pass(input, mask, None)?.hidden)
    }

    /// Logits of head `k` for a single encoder output vector.
    pub fn codeword_logits(&self, o: ndarray::ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
        let hi = self
            .layout
            .heads
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("no head {k}")))?;
        let a = o.insert_axis(ndarray::Axis(0)).dot(self.p(hi.proj));
        Ok(ops::cosine_logits(&a, self.p(hi.codewords), self.config.tau).row(0).to_owned())
    }

    /// Reverse pass from logit gradients to every parameter.
    pub fn backward(&self, pass: &Pass, dlogits: &[Array2<f64>]) -> Result<Grads> {
        let cfg = &self.config;
        let l = &self.layout;
        let mut g = self.params.zeros_like();
        let mut dout = Array2::zeros(pass.output.raw_dim());
        for ((hi, hc), dl) in l.heads.iter().zip(&pass.heads).zip(dlogits) {
            let dl = dl / cfg.tau;
            let dunit = dl.dot(&hc.code_unit);
            let dcode_unit = dl.t().dot(&hc.proj_unit);
            let dcode = ops::normalize_rows_backward(self.p(hi.codewords), &hc.code_norm, &dcode_unit);
            g[hi.codewords] += &dcode;
            let dproj = ops::normalize_rows_backward(&hc.proj, &hc.proj_norm, &dunit);
            g[hi.proj] += &pass.output.t().dot(&dproj);
            dout += &dproj.dot(&self.p(hi.proj).t());
        }
        let (mut gg, mut gb) = take2(&mut g, l.final_g, l.final_b);
        let mut dx = ops::layer_norm_backward(&pass.final_ln, self.p(l.final_g), &dout, &mut gg, &mut gb);
        put2(&mut g, l.final_g, gg, l.final_b, gb);

        for (bi, bc) in l.blocks.iter().zip(&pass.blocks).rev() {
            let Some(bc) = bc else { continue };
            // x_out = x_mid + ffn(ln2(x_mid))
            let mut dact_w = std::mem::take(&mut g[bi.ffn2_w]);
            let mut db2 = std::mem::take(&mut g[bi.ffn2_b]);
            let dact = ops::linear_backward(bc.f_act.view(), self.p(bi.ffn2_w), &dx, &mut dact_w, Some(&mut db2));
            g[bi.ffn2_w] = dact_w;
            g[bi.ffn2_b] = db2;
            let dpre = ops::gelu_backward(&bc.f_pre, &dact);
            let mut dw1 = std::mem::take(&mut g[bi.ffn1_w]);
            let mut db1 = std::mem::take(&mut g[bi.ffn1_b]);
            let db_in = ops::linear_backward(bc.b.view(), self.p(bi.ffn1_w), &dpre, &mut dw1, Some(&mut db1));
            g[bi.ffn1_w] = dw1;
            g[bi.ffn1_b] = db1;
            let (mut g2, mut b2) = take2(&mut g, bi.ln2_g, bi.ln2_b);
            let dmid_ln = ops::layer_norm_backward(&bc.ln2, self.p(bi.ln2_g), &db_in, &mut g2, &mut b2);
            put2(&mut g, bi.ln2_g, g2, bi.ln2_b, b2);
            let dmid = &dx + &dmid_ln;
            // x_mid = x_in + out(attn(ln1(x_in)))
            let mut dwo = std::mem::take(&mut g[bi.out_w]);
            let mut dbo = std::mem::take(&mut g[bi.out_b]);
            let dctx = ops::linear_backward(bc.ctx.view(), self.p(bi.out_w), &dmid, &mut dwo, Some(&mut dbo));
            g[bi.out_w] = dwo;
            g[bi.out_b] = dbo;
            let dqkv = ops::attention_backward(&bc.qkv, &bc.probs, &dctx);
            let mut dwq = std::mem::take(&mut g[bi.qkv_w]);
            let mut dbq = std::mem::take(&mut g[bi.qkv_b]);
            let da = ops::linear_backward(bc.a.view(), self.p(bi.qkv_w), &dqkv, &mut dwq, Some(&mut dbq));
            g[bi.qkv_w] = dwq;
            g[bi.qkv_b] = dbq;
            let (mut g1, mut b1) = take2(&mut g, bi.ln1_g, bi.ln1_b);
            let din_ln = ops::layer_norm_backward(&bc.ln1, self.p(bi.ln1_g), &da, &mut g1, &mut b1);
            put2(&mut g, bi.ln1_g, g1, bi.ln1_b, b1);
            dx = &dmid + &din_ln;
        }

        // x1 = h0 + gelu(posconv(h0))
        let dpos = ops::gelu_backward(&pass.pos_pre, &dx);
        let (mut gw, mut gbias) = take2(&mut g, l.pos_w, l.pos_b);
        let dh0_pos = ops::grouped_conv_backward(
            &pass.hidden[0],
            self.p(l.pos_w),
            &dpos,
            cfg.pos_conv_kernel,
            cfg.pos_conv_groups,
            &mut gw,
            &mut gbias,
        );
        put2(&mut g, l.pos_w, gw, l.pos_b, gbias);
        let mut dh0 = dx + dh0_pos;

        {
            let gm = &mut g[l.mask_emb];
            for (i, &m) in pass.masked.iter().enumerate() {
                if m {
                    let mut row = gm.row_mut(0);
                    row += &dh0.row(i);
                    dh0.row_mut(i).fill(0.0);
                }
            }
        }
        let mut dwi = std::mem::take(&mut g[l.in_w]);
        let mut dbi = std::mem::take(&mut g[l.in_b]);
        let dnormed = ops::linear_backward(pass.in_normed.view(), self.p(l.in_w), &dh0, &mut dwi, Some(&mut dbi));
        g[l.in_w] = dwi;
        g[l.in_b] = dbi;
        let (mut gi, mut bi_) = take2(&mut g, l.in_ln_g, l.in_ln_b);
        let mut dfront = ops::layer_norm_backward(&pass.in_ln, self.p(l.in_ln_g), &dnormed, &mut gi, &mut bi_);
        put2(&mut g, l.in_ln_g, gi, l.in_ln_b, bi_);

        for ((c, idx), (x, pre)) in cfg
            .conv
            .iter()
            .zip(&l.conv)
            .zip(pass.conv_inputs.iter().zip(&pass.conv_pre))
            .rev()
        {
            let dy = ops::gelu_backward(pre, &dfront);
            let (mut dw, mut db) = take2(&mut g, idx.w, idx.b);
            dfront = ops::conv1d_backward(x, self.p(idx.w), &dy, c.kernel, c.stride, &mut dw, &mut db);
            put2(&mut g, idx.w, dw, idx.b, db);
        }

        for (name, v) in self.params.names.iter().zip(&g) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(g)
    }
}

fn take2(g: &mut Grads, a: usize, b: usize) -> (Array2<f64>, Array2<f64>) {
    (std::mem::take(&mut g[a]), std::mem::take(&mut g[b]))
}

fn put2(g: &mut Grads, a: usize, va: Array2<f64>, b: usize, vb: Array2<f64>) {
    g[a] = va;
    g[b] = vb;
}

fn check_finite(x: &Array2<f64>, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

/// Samples as a one-column input matrix.
pub fn waveform_input(w: &Waveform) -> Array2<f64> {
    Array2::from_shape_fn((w.samples.len(), 1), |(i, _)| w.samples[i] as f64)
}

pub fn features_input(f: &FeatureSequence) -> Array2<f64> {
    f.data.mapv(|v| v as f64)
}

/// Weighted cross-entropy over all heads. Frames in `mask` get weight
/// `alpha`, the rest `1 - alpha`; zero-weight frames are skipped entirely.
pub fn loss(logits: &[Array2<f64>], targets: &[&[u32]], mask: &MaskSpec, lc: &LossConfig) -> Result<LossOutput> {
    lc.validate()?;
    if targets.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} target streams for {} heads",
            targets.len(),
            logits.len()
        )));
    }
    let masked = mask.indicator();
    let weight: f64 = masked
        .iter()
        .map(|&m| if m { lc.alpha } else { 1.0 - lc.alpha })
        .sum();
    let mut total = 0.0;
    let mut accuracy = Vec::with_capacity(logits.len());
    let mut dlogits = Vec::with_capacity(logits.len());
    for (lg, z) in logits.iter().zip(targets) {
        let (t, c) = lg.dim();
        if z.len() != t || masked.len() != t {
            return Err(Error::LengthMismatch {
                utterance: String::new(),
                left: t,
                right: z.len(),
            });
        }
        if let Some(&bad) = z.iter().find(|&&v| v as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                size: c,
            });
        }
        let mut acc = HeadAccuracy::default();
        let mut d = Array2::zeros((t, c));
        for (i, (&zi, &m)) in z.iter().zip(&masked).enumerate() {
            let row = lg.row(i);
            let best = argmax(row);
            let hit = best == zi as usize;
            if m {
                acc.masked_total += 1;
                acc.masked_correct += hit as usize;
            } else {
                acc.unmasked_total += 1;
                acc.unmasked_correct += hit as usize;
            }
            let w = if m { lc.alpha } else { 1.0 - lc.alpha };
            if w == 0.0 {
                continue;
            }
            let lp = ops::log_softmax_row(row);
            total -= w * lp[zi as usize];
            let mut drow = d.row_mut(i);
            for (dj, &l) in drow.iter_mut().zip(lp.iter()) {
                *dj = w * l.exp();
            }
            drow[zi as usize] -= w;
        }
        accuracy.push(acc);
        dlogits.push(d);
    }
    Ok(LossOutput {
        loss: total,
        weight,
        accuracy,
        dlogits,
    })
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Slices frames `[start, start + len)` of every target stream.
pub(crate) fn crop_targets(targets: &[Vec<u32>], start: usize, len: usize) -> Vec<Vec<u32>> {
    targets.iter().map(|z| z[start..start + len].to_vec()).collect()
}

/// Rows of `input` feeding output frames `[start, start + len)`.
pub(crate) fn crop_input(cfg: &ModelConfig, input: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    match cfg.input_mode {
        InputMode::Features => input.slice(s![start..start + len, ..]).to_owned(),
        InputMode::Waveform => {
            let stride = cfg.total_stride();
            let span = (len - 1) * stride + cfg.receptive_field();
            input.slice(s![start * stride..start * stride + span, ..]).to_owned()
        }
    }
}
