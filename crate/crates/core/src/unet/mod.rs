//! Noise-prediction UNet with residual blocks, group normalization,
//! self-attention, and time/class embeddings.
//!
//! Encoder levels run from full resolution down, each holding its share of
//! the residual blocks followed by a strided-convolution downsample (except
//! the last). Every encoder block output is kept as a skip connection and
//! consumed, in reverse, by the matching decoder block. The bottleneck is
//! residual block, attention, residual block.
//!
//! The timestep is embedded sinusoidally, passed through a two-layer MLP, and
//! summed with the class embedding when the model is conditional. That sum is
//! projected into every residual block as a per-channel shift applied after
//! the second group norm.

mod config;

use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::{Element, Tensor};

pub use config::{group_count, UNetConfig};

pub const CHECKPOINT_KIND: &str = "unet";
const NORM_EPS: f64 = 1e-5;
/// Initial scale of layers that close a residual branch.
const BRANCH_GAIN: f64 = 0.1;

/// A named, shared parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Clone, Debug)]
struct Level {
    stages: Vec<Stage>,
    /// Downsample (encoder) or upsample (decoder) convolution.
    resample: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Layout {
    time_in: Dense,
    time_out: Dense,
    class_embed: Option<usize>,
    conv_in: Conv,
    down: Vec<Level>,
    mid: (ResBlock, AttnBlock, ResBlock),
    /// Deepest level first.
    up: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
}

struct Builder {
    rng: StreamRng,
    params: Vec<(String, Tensor<f64>)>,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor<f64>) -> usize {
        self.params.push((name, t));
        self.params.len() - 1
    }

    fn scaled_normal(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        let mut t: Tensor<f64> = rng::normal_tensor(shape, &mut self.rng);
        t.scale_in_place(std);
        t
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, gain: f64) -> Conv {
        let std = gain / ((cin * kernel * kernel) as f64).sqrt();
        let w = self.scaled_normal(&[cout, cin, kernel, kernel], std);
        Conv {
            w: self.add(format!("{name}.weight"), w),
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: kernel / 2,
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = self.scaled_normal(&[fout, fin], 1.0 / (fin as f64).sqrt());
        Dense { w: self.add(format!("{name}.weight"), w), b: self.add(format!("{name}.bias"), Tensor::zeros(&[fout])) }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: group_count(c),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1.0),
            emb: self.dense(&format!("{name}.emb"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, BRANCH_GAIN),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 1.0)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1, 1, 1.0),
            k: self.conv(&format!("{name}.k"), c, c, 1, 1, 1.0),
            v: self.conv(&format!("{name}.v"), c, c, 1, 1, 1.0),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, 1, BRANCH_GAIN),
        }
    }
}

/// The noise predictor. `UNet<f32>` is the working precision; `UNet<f64>`
/// exists for gradient checking.
#[derive(Clone, Debug)]
pub struct UNet<F: Element = f32> {
    config: UNetConfig,
    params: Vec<Param<F>>,
    layout: Layout,
}

pub type DenoiserModel = UNet<f32>;

fn class_table_init(seed: u64, num_classes: usize, dim: usize) -> Tensor<f64> {
    rng::normal_tensor(&[num_classes, dim], &mut rng::stream(rng::derive_seed(seed, rng::tag("class_embed")), 0))
}

impl<F: Element> UNet<F> {
    /// Builds a freshly initialized model. Parameters depend only on `config` and `seed`.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { rng: rng::stream(seed, 0), params: Vec::new() };
        let temb = config.time_embed_dim;
        let time_in = b.dense("time.in", config.base_channels, temb);
        let time_out = b.dense("time.out", temb, temb);
        let class_embed =
            config.num_classes.map(|k| b.add("class_embed.weight".into(), class_table_init(seed, k, temb)));

        let chans = config.level_channels();
        let res = config.resolutions();
        let blocks = config.blocks_per_level();
        let attn_at = |level: usize| res[level] == config.attention_resolution;

        let conv_in = b.conv("conv_in", config.in_channels, config.base_channels, 3, 1, 1.0);
        let mut ch = config.base_channels;
        let mut skips = Vec::new();
        let mut down = Vec::new();
        for level in 0..config.levels() {
            let mut stages = Vec::new();
            for i in 0..blocks[level] {
                let name = format!("down.{level}.{i}");
                let r = b.res(&format!("{name}.res"), ch, chans[level], temb);
                ch = chans[level];
                let a = attn_at(level).then(|| b.attn(&format!("{name}.attn"), ch));
                stages.push(Stage { res: r, attn: a });
                skips.push(ch);
            }
            let resample = (level + 1 < config.levels()).then(|| b.conv(&format!("down.{level}.downsample"), ch, ch, 3, 2, 1.0));
            down.push(Level { stages, resample });
        }

        let mid = (b.res("mid.res1", ch, ch, temb), b.attn("mid.attn", ch), b.res("mid.res2", ch, ch, temb));

        let mut up = Vec::new();
        for level in (0..config.levels()).rev() {
            let mut stages = Vec::new();
            for i in 0..blocks[level] {
                let name = format!("up.{level}.{i}");
                let skip = skips.pop().expect("one skip per encoder block");
                let r = b.res(&format!("{name}.res"), ch + skip, chans[level], temb);
                ch = chans[level];
                let a = attn_at(level).then(|| b.attn(&format!("{name}.attn"), ch));
                stages.push(Stage { res: r, attn: a });
            }
            let resample = (level > 0).then(|| b.conv(&format!("up.{level}.upsample"), ch, ch, 3, 1, 1.0));
            up.push(Level { stages, resample });
        }
        let out_norm = b.norm("out.norm", ch);
        let out_conv = b.conv("out.conv", ch, config.in_channels, 3, 1, BRANCH_GAIN);

        let layout = Layout { time_in, time_out, class_embed, conv_in, down, mid, up, out_norm, out_conv };
        let params = b.params.into_iter().map(|(name, t)| Param { name, value: Arc::new(t.cast()) }).collect();
        Ok(UNet { config: config.clone(), params, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|p| p.name == name).map(|p| &*p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_conditional(&self) -> bool {
        self.config.num_classes.is_some()
    }

    /// CRC-32 over the little-endian bytes of every parameter, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(&v.as_f64().to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn cast<G: Element>(&self) -> UNet<G> {
        UNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Arc::new(p.value.cast()) })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Conditional copy of an unconditional model: every existing parameter is
    /// kept and a fresh class-embedding table is initialized from `seed`.
    pub fn with_class_table(&self, num_classes: usize, seed: u64) -> Result<Self> {
        if self.is_conditional() {
            return Err(Error::InvalidArgument("model already has a class embedding".into()));
        }
        let config = UNetConfig { num_classes: Some(num_classes), ..self.config.clone() };
        let mut model = UNet::<F>::build(&config, seed)?;
        for p in model.params.iter_mut() {
            if p.name == "class_embed.weight" {
                continue;
            }
            let src = self.params.iter().find(|q| q.name == p.name).expect("same architecture");
            p.value = src.value.clone();
        }
        Ok(model)
    }

    fn check_inputs(&self, xt: &Tensor<F>, t: &[usize], class_ids: Option<&[usize]>) -> Result<usize> {
        let c = &self.config;
        let (b, ch, h, w) = xt.dims4()?;
        if (ch, h, w) != (c.in_channels, c.image_size, c.image_size) {
            return Err(Error::Shape(format!(
                "model expects [B, {}, {}, {}], got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                xt.shape()
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&v| v == 0 || v > c.timesteps) {
            return Err(Error::TimestepOutOfRange { t: bad, max: c.timesteps });
        }
        match (c.num_classes, class_ids) {
            (Some(k), Some(ids)) => {
                if ids.len() != b {
                    return Err(Error::Shape(format!("{} class ids for a batch of {b}", ids.len())));
                }
                if let Some(&bad) = ids.iter().find(|&&id| id >= k) {
                    return Err(Error::InvalidClass { id: bad, num_classes: k });
                }
            }
            (Some(_), None) => return Err(Error::InvalidArgument("conditional model requires class ids".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("unconditional model takes no class ids".into())),
            (None, None) => {}
        }
        Ok(b)
    }

    /// Records the forward pass on `tape`.
    ///
    /// Returns the noise estimate and the parameter leaves, in
    /// [`params`](Self::params) order, for gradient lookup. Dropout is active
    /// only when `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &Tape<F>,
        xt: &Var<F>,
        t: &[usize],
        class_ids: Option<&[usize]>,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<(Var<F>, Vec<Var<F>>)> {
        let batch = self.check_inputs(xt.value(), t, class_ids)?;
        let p: Vec<Var<F>> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let l = &self.layout;

        let sin = tape.constant(timestep_embedding(t, self.config.base_channels));
        let hidden = tape.silu(&tape.linear(&sin, &p[l.time_in.w], &p[l.time_in.b]));
        let mut temb = tape.linear(&hidden, &p[l.time_out.w], &p[l.time_out.b]);
        if let (Some(table), Some(ids)) = (l.class_embed, class_ids) {
            temb = tape.add(&temb, &tape.embedding(&p[table], ids));
        }
        debug_assert_eq!(temb.shape()[0], batch);
        let mut ctx = Ctx {
            tape,
            p: &p,
            temb: tape.silu(&temb),
            dropout: dropout_rng.filter(|_| self.config.dropout > 0.0).map(|r| (r, self.config.dropout)),
        };

        let mut h = ctx.conv(xt, l.conv_in);
        let mut skips = Vec::new();
        for level in &l.down {
            for stage in &level.stages {
                h = ctx.stage(&h, stage);
                skips.push(h.clone());
            }
            if let Some(c) = level.resample {
                h = ctx.conv(&h, c);
            }
        }
        h = ctx.res(&h, &l.mid.0);
        h = ctx.attn(&h, &l.mid.1);
        h = ctx.res(&h, &l.mid.2);
        for level in &l.up {
            for stage in &level.stages {
                let skip = skips.pop().expect("skip per decoder block");
                h = ctx.stage(&tape.concat_channels(&h, &skip), stage);
            }
            if let Some(c) = level.resample {
                h = ctx.conv(&tape.upsample_nearest2(&h), c);
            }
        }
        let h = ctx.norm(&h, l.out_norm);
        let out = ctx.conv(&tape.silu(&h), l.out_conv);
        Ok((out, p))
    }

    /// Noise estimate for `xt`. Dropout is applied only with `train_rng`.
    pub fn predict_noise(
        &self,
        xt: &Tensor<F>,
        t: &[usize],
        class_ids: Option<&[usize]>,
        train_rng: Option<&mut StreamRng>,
    ) -> Result<Tensor<F>> {
        let tape = Tape::inference();
        let x = tape.constant(xt.clone());
        let (out, _) = self.forward(&tape, &x, t, class_ids, train_rng)?;
        Ok(out.into_tensor())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, meta);
        for p in &self.params {
            ck.push(p.name.clone(), p.value.cast());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_extra(path, serde_json::Value::Null)
    }

    /// Saves with free-form metadata (schedule, normalization) stored under `extra`.
    pub fn save_with_extra(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::format(path, format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.kind)));
        }
        let config: UNetConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::format(path, format!("bad model config: {e}")))?;
        let mut model = UNet::<F>::build(&config, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::format(
                path,
                format!("manifest lists {} tensors, architecture has {}", ck.tensors.len(), model.params.len()),
            ));
        }
        for p in model.params.iter_mut() {
            let t = ck.get(&p.name).ok_or_else(|| Error::format(path, format!("manifest lacks `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    path,
                    format!("manifest shape {:?} for `{}` disagrees with architecture {:?}", t.shape(), p.name, p.value.shape()),
                ));
            }
            p.value = Arc::new(t.cast());
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with_extra(path)?.0)
    }

    pub fn load_with_extra(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = Checkpoint::load(path)?;
        let model = Self::from_checkpoint(&ck, path)?;
        Ok((model, ck.meta["extra"].clone()))
    }

    /// Loads and insists the stored configuration equals `expected`.
    pub fn load_expecting(path: &Path, expected: &UNetConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config != *expected {
            return Err(Error::ConfigConflict(format!(
                "{} holds {:?}, expected {:?}",
                path.display(),
                model.config,
                expected
            )));
        }
        Ok(model)
    }
}

impl<F: Element> NoisePredictor<F> for UNet<F> {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (self.config.in_channels, self.config.image_size, self.config.image_size)
    }

    fn num_classes(&self) -> Option<usize> {
        self.config.num_classes
    }

    fn predict_noise(&self, xt: &Tensor<F>, t: &[usize], class_ids: Option<&[usize]>) -> Result<Tensor<F>> {
        UNet::predict_noise(self, xt, t, class_ids, None)
    }
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn timestep_embedding<F: Element>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let step = (10000f64).ln() / (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let args: Vec<f64> = (0..half).map(|i| ti as f64 * (-(i as f64) * step).exp()).collect();
        out.extend(args.iter().map(|a| F::of(a.sin())));
        out.extend(args.iter().map(|a| F::of(a.cos())));
        out.extend(std::iter::repeat_n(F::zero(), dim - 2 * half));
    }
    Tensor::from_vec(&[t.len(), dim], out).expect("embedding shape")
}

struct Ctx<'a, F: Element> {
    tape: &'a Tape<F>,
    p: &'a [Var<F>],
    /// Activated embedding shared by every residual block.
    temb: Var<F>,
    dropout: Option<(&'a mut StreamRng, f64)>,
}

impl<F: Element> Ctx<'_, F> {
    fn conv(&self, x: &Var<F>, c: Conv) -> Var<F> {
        self.tape.conv2d(x, &self.p[c.w], &self.p[c.b], c.stride, c.pad)
    }

    fn norm(&self, x: &Var<F>, n: Norm) -> Var<F> {
        self.tape.group_norm(x, &self.p[n.gamma], &self.p[n.beta], n.groups, NORM_EPS)
    }

    fn dropout(&mut self, x: &Var<F>) -> Var<F> {
        let Some((rng, p)) = self.dropout.as_mut() else { return x.clone() };
        let keep = F::of(1.0 / (1.0 - *p));
        let mut mask = Tensor::zeros(x.shape());
        for m in mask.data_mut() {
            *m = if rng.random::<f64>() < *p { F::zero() } else { keep };
        }
        self.tape.mul_const(x, mask)
    }

    fn res(&mut self, x: &Var<F>, b: &ResBlock) -> Var<F> {
        let tape = self.tape;
        let h = self.conv(&tape.silu(&self.norm(x, b.norm1)), b.conv1);
        let e = tape.linear(&self.temb, &self.p[b.emb.w], &self.p[b.emb.b]);
        // Shift after the norm: with one channel per group a pre-norm offset would cancel.
        let h = tape.silu(&tape.add_channel_bias(&self.norm(&h, b.norm2), &e));
        let h = self.dropout(&h);
        let h = self.conv(&h, b.conv2);
        let skip = match b.skip {
            Some(c) => self.conv(x, c),
            None => x.clone(),
        };
        tape.add(&h, &skip)
    }

    fn attn(&self, x: &Var<F>, a: &AttnBlock) -> Var<F> {
        let n = self.norm(x, a.norm);
        let (q, k, v) = (self.conv(&n, a.q), self.conv(&n, a.k), self.conv(&n, a.v));
        let o = self.tape.spatial_attention(&q, &k, &v);
        self.tape.add(x, &self.conv(&o, a.proj))
    }

    fn stage(&mut self, x: &Var<F>, s: &Stage) -> Var<F> {
        let h = self.res(x, &s.res);
        match &s.attn {
            Some(a) => self.attn(&h, a),
            None => h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_classes: Option<usize>) -> UNetConfig {
        UNetConfig { num_classes, dropout: 0.0, ..UNetConfig::small(16, 8, &[1, 2], 8) }
    }

    #[test]
    fn shape_is_preserved() {
        let m = UNet::<f32>::build(&tiny(Some(3)), 1).unwrap();
        let x: Tensor<f32> = rng::normal_tensor(&[2, 1, 16, 16], &mut rng::stream(5, 0));
        let y = m.predict_noise(&x, &[1, 1000], Some(&[0, 2]), None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn input_validation() {
        let m = UNet::<f32>::build(&tiny(Some(3)), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        assert!(m.predict_noise(&x, &[5], None, None).is_err());
        assert!(matches!(m.predict_noise(&x, &[5], Some(&[3]), None), Err(Error::InvalidClass { .. })));
        assert!(matches!(m.predict_noise(&x, &[0], Some(&[1]), None), Err(Error::TimestepOutOfRange { .. })));
        assert!(m.predict_noise(&x, &[1001], Some(&[1]), None).is_err());
        assert!(m.predict_noise(&Tensor::zeros(&[1, 1, 8, 8]), &[5], Some(&[1]), None).is_err());
        let u = UNet::<f32>::build(&tiny(None), 1).unwrap();
        assert!(u.predict_noise(&x, &[5], Some(&[0]), None).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = UNetConfig { dropout: 0.3, ..tiny(None) };
        let m = UNet::<f32>::build(&cfg, 2).unwrap();
        let x: Tensor<f32> = rng::normal_tensor(&[1, 1, 16, 16], &mut rng::stream(6, 0));
        let a = m.predict_noise(&x, &[10], None, None).unwrap();
        let b = m.predict_noise(&x, &[10], None, None).unwrap();
        assert_eq!(a, b);
        let c = m.predict_noise(&x, &[10], None, Some(&mut rng::stream(1, 0))).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding::<f64>(&[0, 3], 8);
        assert_eq!(e.shape(), &[2, 8]);
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e.data()[8] - 3f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn class_table_attachment_keeps_other_parameters() {
        let base = UNet::<f32>::build(&tiny(None), 3).unwrap();
        let cond = base.with_class_table(4, 11).unwrap();
        assert_eq!(cond.config().num_classes, Some(4));
        for p in base.params() {
            assert_eq!(cond.param(&p.name).unwrap(), &*p.value, "{}", p.name);
        }
        assert_eq!(cond.param("class_embed.weight").unwrap().shape(), &[4, 32]);
        assert!(cond.with_class_table(4, 1).is_err());
    }
}
