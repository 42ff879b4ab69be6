//! Conditional noise-prediction network: a compact U-Net with sinusoidal
//! timestep embeddings, a learned class-embedding table (the last row is the
//! null condition) and one self-attention block at the bottleneck.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Eager, Graph, Op};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::params::ParamSet;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub type DenoiserParams = ParamSet;

const NORM_EPSILON: f64 = 1e-5;
const MAX_NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    /// Includes the reserved null index `num_classes - 1`.
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            base_width: 32,
            depth: 2,
            embed_dim: 64,
            num_classes: 9,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size == 0 || self.channels == 0 || self.base_width == 0 {
            return bad("image_size, channels and base_width must be positive".into());
        }
        if self.depth >= usize::BITS as usize || self.image_size % (1 << self.depth) != 0 {
            return bad(format!(
                "image_size {} not divisible by 2^depth (depth {})",
                self.image_size, self.depth
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2 (one real class plus null), got {}",
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Index of the unconditional (null) embedding row.
    pub fn null_class(&self) -> usize {
        self.num_classes - 1
    }

    /// Channel width at resolution level `level` (0 = full size).
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            self.base_width * 2
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Largest divisor of `channels` not exceeding the group cap.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Sinusoidal embedding: `sin(t / 10000^(2i/dim))` in the first half,
/// the matching cosines in the second.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(invalid("time_embedding", format!("dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = math::powf(10000.0, 2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out[i] = math::sin(arg);
        out[half + i] = math::cos(arg);
    }
    Ok(out)
}

/// Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d_k)) V` over
/// `(batch, n, d)` stacks.
pub fn attention<G: Graph>(g: &mut G, q: &G::Value, k: &G::Value, v: &G::Value, d_k: usize) -> Result<G::Value> {
    let logits = g.apply(
        Op::Matmul {
            transpose_a: false,
            transpose_b: true,
        },
        &[q, k],
    )?;
    let logits = g.apply(Op::Scale(1.0 / math::sqrt(d_k as f64)), &[&logits])?;
    let weights = g.apply(Op::Softmax { axis: 2 }, &[&logits])?;
    g.apply(
        Op::Matmul {
            transpose_a: false,
            transpose_b: false,
        },
        &[&weights, v],
    )
}

/// Tape-free attention on plain matrices with the input checks applied.
pub fn attention_matrices(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(invalid("attention", "Q, K and V must be matrices"));
    }
    if q.shape()[1] != k.shape()[1] {
        return Err(crate::error::mismatch("attention", q.shape(), k.shape()));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(crate::error::mismatch("attention", k.shape(), v.shape()));
    }
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshaped(&s)
    };
    let (q3, k3, v3) = (lift(q)?, lift(k)?, lift(v)?);
    let mut g = Eager::new();
    let out = attention(&mut g, &Eager::input(&q3), &Eager::input(&k3), &Eager::input(&v3), q.shape()[1])?;
    out.into_owned().reshaped(&[q.shape()[0], v.shape()[1]])
}

/// The network definition: config plus the ordered parameter layout.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: Vec<(String, Vec<usize>)>,
    index: BTreeMap<String, usize>,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        self.entries.push((name, shape));
    }

    fn norm(&mut self, prefix: &str, ch: usize) {
        self.push(format!("{prefix}.scale"), vec![ch]);
        self.push(format!("{prefix}.shift"), vec![ch]);
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.push(format!("{prefix}.weight"), vec![c_out, c_in, k, k]);
        self.push(format!("{prefix}.bias"), vec![c_out]);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.weight"), vec![d_in, d_out]);
        self.push(format!("{prefix}.bias"), vec![d_out]);
    }

    fn res_block(&mut self, prefix: &str, c_in: usize, c_out: usize, embed: usize) {
        self.norm(&format!("{prefix}.norm1"), c_in);
        self.conv(&format!("{prefix}.conv1"), c_out, c_in, 3);
        self.linear(&format!("{prefix}.emb"), embed, c_out);
        self.norm(&format!("{prefix}.norm2"), c_out);
        self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
        if c_in != c_out {
            self.conv(&format!("{prefix}.skip"), c_out, c_in, 1);
        }
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let mut b = LayoutBuilder { entries: Vec::new() };
        b.linear("time.lin1", e, e);
        b.linear("time.lin2", e, e);
        b.push("class_embed".into(), vec![config.num_classes, e]);
        b.conv("in_conv", config.width(0), config.channels, 3);
        for l in 0..config.depth {
            b.res_block(&format!("down.{l}.res"), config.width(l), config.width(l), e);
            b.conv(&format!("down.{l}.downsample"), config.width(l + 1), config.width(l), 3);
        }
        let wd = config.width(config.depth);
        b.res_block("mid.res1", wd, wd, e);
        b.norm("mid.attn.norm", wd);
        for m in ["w_q", "w_k", "w_v", "w_out"] {
            b.push(format!("mid.attn.{m}"), vec![wd, wd]);
        }
        b.push("mid.attn.b_out".into(), vec![wd]);
        b.res_block("mid.res2", wd, wd, e);
        for l in (0..config.depth).rev() {
            b.res_block(
                &format!("up.{l}.res"),
                config.width(l + 1) + config.width(l),
                config.width(l),
                e,
            );
        }
        b.norm("out.norm", config.width(0));
        b.conv("out.conv", config.channels, config.width(0), 3);
        let index = b
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            layout: b.entries,
            index,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Parameter names and shapes in their fixed order.
    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases
    /// and norm shifts zero, norm scales one, output conv all zero.
    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        let mut rng = rng::seeded(seed, Stream::Init);
        let entries = self
            .layout
            .iter()
            .map(|(name, shape)| {
                let t = if name.starts_with("out.conv") || name.ends_with(".bias") || name.ends_with(".shift") || name.ends_with("b_out") {
                    Tensor::zeros(shape)
                } else if name.ends_with(".scale") {
                    Tensor::ones(shape)
                } else {
                    let fan_in = match shape.len() {
                        4 => shape[1] * shape[2] * shape[3],
                        2 if name == "class_embed" => 1,
                        _ => shape[0],
                    };
                    let bound = 1.0 / math::sqrt(fan_in as f64);
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| (2.0 * rng::unit(&mut rng) - 1.0) * bound).collect();
                    Tensor::new(shape.clone(), data).expect("layout shapes are valid")
                };
                (name.clone(), t)
            })
            .collect();
        ParamSet::new(entries).expect("layout names are unique")
    }

    /// Errors unless `params` matches this network's layout.
    pub fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in self.layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter `{pn}` {:?} does not match layout `{name}` {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, x_shape: &[usize], t: &[usize], cond: &[usize]) -> Result<()> {
        let c = &self.config;
        let expect = [x_shape.first().copied().unwrap_or(0), c.channels, c.image_size, c.image_size];
        if x_shape.len() != 4 || x_shape != expect || x_shape[0] == 0 {
            return Err(crate::error::mismatch("denoiser_forward", x_shape, &expect));
        }
        let batch = x_shape[0];
        if t.len() != batch || cond.len() != batch {
            return Err(invalid(
                "denoiser_forward",
                format!("batch {batch} with {} timesteps and {} conditions", t.len(), cond.len()),
            ));
        }
        if let Some(&bad) = cond.iter().find(|&&k| k >= c.num_classes) {
            return Err(invalid(
                "denoiser_forward",
                format!("class index {bad} out of range for {} classes", c.num_classes),
            ));
        }
        Ok(())
    }

    /// Predicts the noise in `x` (shape `(B, C, H, W)`) at timesteps `t` under
    /// conditions `cond`. `params` are graph values in layout order.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        params: &[G::Value],
        x: &G::Value,
        x_shape: &[usize],
        t: &[usize],
        cond: &[usize],
    ) -> Result<G::Value> {
        self.check_inputs(x_shape, t, cond)?;
        if params.len() != self.layout.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        let mut net = Net {
            g,
            params,
            index: &self.index,
            batch: x_shape[0],
            embed: self.config.embed_dim,
        };
        net.run(&self.config, x, t, cond)
    }

    /// Tape-free prediction.
    pub fn predict(&self, params: &DenoiserParams, x: &Tensor, t: &[usize], cond: &[usize]) -> Result<Tensor> {
        self.check_params(params)?;
        let mut g = Eager::new();
        let bound: Vec<_> = params.tensors().iter().map(Eager::input).collect();
        let xv = Eager::input(x);
        let out = self.forward(&mut g, &bound, &xv, x.shape(), t, cond)?;
        Ok(out.into_owned())
    }
}

fn matmul() -> Op {
    Op::Matmul {
        transpose_a: false,
        transpose_b: false,
    }
}

/// One forward pass in progress.
struct Net<'n, G: Graph> {
    g: &'n mut G,
    params: &'n [G::Value],
    index: &'n BTreeMap<String, usize>,
    batch: usize,
    embed: usize,
}

impl<'n, G: Graph> Net<'n, G> {
    fn p(&self, name: &str) -> &'n G::Value {
        let params: &'n [G::Value] = self.params;
        &params[self.index[name]]
    }

    fn op(&mut self, op: Op, inputs: &[&G::Value]) -> Result<G::Value> {
        self.g.apply(op, inputs)
    }

    fn conv(&mut self, x: &G::Value, prefix: &str, stride: usize, padding: usize) -> Result<G::Value> {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.g.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    fn linear(&mut self, x: &G::Value, prefix: &str) -> Result<G::Value> {
        let w = self.p(&format!("{prefix}.weight"));
        let h = self.g.apply(matmul(), &[x, w])?;
        let b = self.p(&format!("{prefix}.bias"));
        self.g.apply(Op::Add, &[&h, b])
    }

    /// Group norm followed by per-channel affine.
    fn norm(&mut self, x: &G::Value, prefix: &str, ch: usize) -> Result<G::Value> {
        let n = self.op(
            Op::Normalize {
                group_count: norm_groups(ch),
                epsilon: NORM_EPSILON,
            },
            &[x],
        )?;
        let shape = Op::Reshape {
            shape: vec![1, ch, 1, 1],
        };
        let scale = self.g.apply(shape.clone(), &[self.p(&format!("{prefix}.scale"))])?;
        let shift = self.g.apply(shape, &[self.p(&format!("{prefix}.shift"))])?;
        let n = self.op(Op::Mul, &[&n, &scale])?;
        self.op(Op::Add, &[&n, &shift])
    }

    fn res_block(&mut self, x: &G::Value, prefix: &str, c_in: usize, c_out: usize, cond: &G::Value) -> Result<G::Value> {
        let h = self.norm(x, &format!("{prefix}.norm1"), c_in)?;
        let h = self.op(Op::Silu, &[&h])?;
        let h = self.conv(&h, &format!("{prefix}.conv1"), 1, 1)?;
        let e = self.linear(cond, &format!("{prefix}.emb"))?;
        let e = self.op(
            Op::Reshape {
                shape: vec![self.batch, c_out, 1, 1],
            },
            &[&e],
        )?;
        let h = self.op(Op::Add, &[&h, &e])?;
        let h = self.norm(&h, &format!("{prefix}.norm2"), c_out)?;
        let h = self.op(Op::Silu, &[&h])?;
        let h = self.conv(&h, &format!("{prefix}.conv2"), 1, 1)?;
        if c_in == c_out {
            self.op(Op::Add, &[&h, x])
        } else {
            let skip = self.conv(x, &format!("{prefix}.skip"), 1, 0)?;
            self.op(Op::Add, &[&h, &skip])
        }
    }

    fn attention_block(&mut self, x: &G::Value, ch: usize, side: usize) -> Result<G::Value> {
        let (b, n) = (self.batch, side * side);
        let h = self.norm(x, "mid.attn.norm", ch)?;
        let h = self.op(Op::Reshape { shape: vec![b, ch, n] }, &[&h])?;
        let tokens = self.op(Op::Transpose, &[&h])?;
        let flat = self.op(Op::Reshape { shape: vec![b * n, ch] }, &[&tokens])?;
        let project = |net: &mut Self, name: &str| -> Result<G::Value> {
            let w = net.p(name);
            let y = net.g.apply(matmul(), &[&flat, w])?;
            net.op(Op::Reshape { shape: vec![b, n, ch] }, &[&y])
        };
        let q = project(self, "mid.attn.w_q")?;
        let k = project(self, "mid.attn.w_k")?;
        let v = project(self, "mid.attn.w_v")?;
        let o = attention(self.g, &q, &k, &v, ch)?;
        let o = self.op(Op::Reshape { shape: vec![b * n, ch] }, &[&o])?;
        let o = self.g.apply(matmul(), &[&o, self.p("mid.attn.w_out")])?;
        let o = self.g.apply(Op::Add, &[&o, self.p("mid.attn.b_out")])?;
        let o = self.op(Op::Reshape { shape: vec![b, n, ch] }, &[&o])?;
        let o = self.op(Op::Transpose, &[&o])?;
        let o = self.op(Op::Reshape { shape: vec![b, ch, side, side] }, &[&o])?;
        self.op(Op::Add, &[x, &o])
    }

    /// Nearest-neighbour 2x upsampling expressed with reshape and concat.
    fn upsample(&mut self, x: &G::Value, ch: usize, side: usize) -> Result<G::Value> {
        let b = self.batch;
        let h = self.op(Op::Reshape { shape: vec![b, ch, side, side, 1] }, &[x])?;
        let h = self.op(Op::Concat { axis: 4 }, &[&h, &h])?;
        let h = self.op(Op::Reshape { shape: vec![b, ch, side, 1, 2 * side] }, &[&h])?;
        let h = self.op(Op::Concat { axis: 3 }, &[&h, &h])?;
        self.op(Op::Reshape { shape: vec![b, ch, 2 * side, 2 * side] }, &[&h])
    }

    fn run(&mut self, c: &DenoiserConfig, x: &G::Value, t: &[usize], cond: &[usize]) -> Result<G::Value> {
        let mut temb = Vec::with_capacity(self.batch * self.embed);
        for &ti in t {
            temb.extend(time_embedding(ti, self.embed)?);
        }
        let temb = self.g.constant(Tensor::new(vec![self.batch, self.embed], temb)?);
        let h = self.linear(&temb, "time.lin1")?;
        let h = self.op(Op::Silu, &[&h])?;
        let temb = self.linear(&h, "time.lin2")?;
        let cemb = self.g.apply(
            Op::EmbedLookup {
                indices: cond.to_vec(),
            },
            &[self.p("class_embed")],
        )?;
        let cvec = self.op(Op::Add, &[&temb, &cemb])?;
        let cvec = self.op(Op::Silu, &[&cvec])?;

        let mut h = self.conv(x, "in_conv", 1, 1)?;
        let mut skips = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            h = self.res_block(&h, &format!("down.{l}.res"), c.width(l), c.width(l), &cvec)?;
            let down = self.conv(&h, &format!("down.{l}.downsample"), 2, 1)?;
            skips.push(h);
            h = down;
        }
        let wd = c.width(c.depth);
        let side = c.image_size >> c.depth;
        h = self.res_block(&h, "mid.res1", wd, wd, &cvec)?;
        h = self.attention_block(&h, wd, side)?;
        h = self.res_block(&h, "mid.res2", wd, wd, &cvec)?;
        for l in (0..c.depth).rev() {
            let side = c.image_size >> (l + 1);
            let up = self.upsample(&h, c.width(l + 1), side)?;
            let skip = skips.pop().expect("one skip per level");
            let joined = self.op(Op::Concat { axis: 1 }, &[&up, &skip])?;
            h = self.res_block(
                &joined,
                &format!("up.{l}.res"),
                c.width(l + 1) + c.width(l),
                c.width(l),
                &cvec,
            )?;
        }
        let h = self.norm(&h, "out.norm", c.width(0))?;
        let h = self.op(Op::Silu, &[&h])?;
        self.conv(&h, "out.conv", 1, 1)
    }
}
