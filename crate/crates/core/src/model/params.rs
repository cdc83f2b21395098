use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InputMode, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Named parameter tensors in a fixed order. Gradients and optimizer state
/// use the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ffn1_w: usize,
    pub ffn1_b: usize,
    pub ffn2_w: usize,
    pub ffn2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadIdx {
    pub proj: usize,
    pub codewords: usize,
}

/// Positions of each tensor inside the store.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv: Vec<ConvIdx>,
    pub in_ln_g: usize,
    pub in_ln_b: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub mask_emb: usize,
    pub pos_w: usize,
    pub pos_b: usize,
    pub blocks: Vec<BlockIdx>,
    pub final_g: usize,
    pub final_b: usize,
    pub heads: Vec<HeadIdx>,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Codewords,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let e = cfg.embed_dim;
    let mut conv = Vec::new();
    if cfg.input_mode == InputMode::Waveform {
        let mut cin = 1;
        for (i, c) in cfg.conv.iter().enumerate() {
            let fan_in = cin * c.kernel;
            conv.push(ConvIdx {
                w: b.add(
                    format!("conv.{i}.weight"),
                    (fan_in, c.channels),
                    Init::Normal((2.0 / fan_in as f64).sqrt()),
                ),
                b: b.add(format!("conv.{i}.bias"), (1, c.channels), Init::Zeros),
            });
            cin = c.channels;
        }
    }
    let din = cfg.frontend_dim();
    let in_ln_g = b.add("input.norm.gain".into(), (1, din), Init::Ones);
    let in_ln_b = b.add("input.norm.bias".into(), (1, din), Init::Zeros);
    let in_w = b.add(
        "input.proj.weight".into(),
        (din, e),
        Init::Normal(1.0 / (din as f64).sqrt()),
    );
    let in_b = b.add("input.proj.bias".into(), (1, e), Init::Zeros);
    let mask_emb = b.add("mask_embedding".into(), (1, e), Init::Normal(0.1));
    let cg = e / cfg.pos_conv_groups;
    let pos_fan = cg * cfg.pos_conv_kernel;
    let pos_w = b.add(
        "pos_conv.weight".into(),
        (e, pos_fan),
        Init::Normal(0.5 / (pos_fan as f64).sqrt()),
    );
    let pos_b = b.add("pos_conv.bias".into(), (1, e), Init::Zeros);
    let residual = 1.0 / (2.0 * cfg.num_layers.max(1) as f64).sqrt();
    let blocks = (0..cfg.num_layers)
        .map(|i| {
            let p = |s: &str| format!("blocks.{i}.{s}");
            BlockIdx {
                ln1_g: b.add(p("attn_norm.gain"), (1, e), Init::Ones),
                ln1_b: b.add(p("attn_norm.bias"), (1, e), Init::Zeros),
                qkv_w: b.add(p("attn.qkv.weight"), (e, 3 * e), Init::Normal(1.0 / (e as f64).sqrt())),
                qkv_b: b.add(p("attn.qkv.bias"), (1, 3 * e), Init::Zeros),
                out_w: b.add(
                    p("attn.out.weight"),
                    (e, e),
                    Init::Normal(residual / (e as f64).sqrt()),
                ),
                out_b: b.add(p("attn.out.bias"), (1, e), Init::Zeros),
                ln2_g: b.add(p("ffn_norm.gain"), (1, e), Init::Ones),
                ln2_b: b.add(p("ffn_norm.bias"), (1, e), Init::Zeros),
                ffn1_w: b.add(
                    p("ffn.in.weight"),
                    (e, cfg.ffn_dim),
                    Init::Normal(1.0 / (e as f64).sqrt()),
                ),
                ffn1_b: b.add(p("ffn.in.bias"), (1, cfg.ffn_dim), Init::Zeros),
                ffn2_w: b.add(
                    p("ffn.out.weight"),
                    (cfg.ffn_dim, e),
                    Init::Normal(residual / (cfg.ffn_dim as f64).sqrt()),
                ),
                ffn2_b: b.add(p("ffn.out.bias"), (1, e), Init::Zeros),
            }
        })
        .collect();
    let final_g = b.add("final_norm.gain".into(), (1, e), Init::Ones);
    let final_b = b.add("final_norm.bias".into(), (1, e), Init::Zeros);
    let heads = cfg
        .codebook_sizes
        .iter()
        .enumerate()
        .map(|(k, &c)| HeadIdx {
            proj: b.add(
                format!("heads.{k}.proj"),
                (e, cfg.proj_dim),
                Init::Normal(1.0 / (e as f64).sqrt()),
            ),
            codewords: b.add(format!("heads.{k}.codewords"), (c, cfg.proj_dim), Init::Codewords),
        })
        .collect();
    let layout = Layout {
        conv,
        in_ln_g,
        in_ln_b,
        in_w,
        in_b,
        mask_emb,
        pos_w,
        pos_b,
        blocks,
        final_g,
        final_b,
        heads,
    };
    (layout, b)
}

pub(crate) fn layout(cfg: &ModelConfig) -> Layout {
    plan(cfg).0
}

/// Expected `(name, shape)` list for a configuration.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (_, b) = plan(cfg);
    b.names.into_iter().zip(b.shapes).collect()
}

/// Relative spread of codeword embeddings around their shared direction.
/// Small spread keeps initial logits nearly equal, so the loss starts near
/// `ln C` per frame and head.
pub const CODEWORD_SPREAD: f64 = 0.05;

pub(crate) fn init(cfg: &ModelConfig, seed: u64) -> Result<(Layout, ParamStore)> {
    cfg.validate()?;
    let (layout, b) = plan(cfg);
    let mut values = Vec::with_capacity(b.names.len());
    for (i, ((name, &(r, c)), init)) in b.names.iter().zip(&b.shapes).zip(&b.inits).enumerate() {
        let mut rng = rng_from(seed, &["init".into(), i.into(), name.as_str().into()]);
        let v = match *init {
            Init::Zeros => Array2::zeros((r, c)),
            Init::Ones => Array2::ones((r, c)),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                Array2::from_shape_simple_fn((r, c), || d.sample(&mut rng))
            }
            Init::Codewords => {
                let unit = Normal::new(0.0, 1.0).expect("unit normal");
                let base: Vec<f64> = (0..c).map(|_| unit.sample(&mut rng)).collect();
                let mut m = Array2::from_shape_fn((r, c), |(_, j)| base[j]);
                m.mapv_inplace(|v| v + CODEWORD_SPREAD * rng.sample::<f64, _>(unit));
                m
            }
        };
        values.push(v);
    }
    Ok((
        layout,
        ParamStore {
            names: b.names,
            values,
        },
    ))
}
