use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    concat_channels, join, split_channels, upsample_nearest, upsample_nearest_backward, Attention,
    Conv2d, GroupNorm, Linear, Module, Param, Real, Silu, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stage indices (0 = full resolution) that get self-attention.
    pub attention_stages: Vec<usize>,
    pub mid_attention: bool,
    pub time_embedding_dim: usize,
    /// Append row/column coordinate planes to the input.
    pub coord_channels: bool,
}

impl UNetConfig {
    pub fn paper(height: usize, width: usize) -> Self {
        Self {
            in_channels: 3,
            height,
            width,
            stage_channels: vec![128, 128, 256, 256, 512],
            blocks_per_stage: 2,
            attention_stages: vec![4],
            mid_attention: true,
            time_embedding_dim: 128,
            coord_channels: true,
        }
    }

    pub fn desk(height: usize, width: usize) -> Self {
        Self {
            in_channels: 3,
            height,
            width,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 1,
            attention_stages: vec![],
            mid_attention: true,
            time_embedding_dim: 32,
            coord_channels: true,
        }
    }

    /// `(height, width)` factor of each downsampling step.
    pub fn down_factors(&self) -> Vec<(usize, usize)> {
        let mut h = self.height;
        (1..self.stage_channels.len())
            .map(|_| {
                let fh = if h > 1 { 2 } else { 1 };
                h /= fh;
                (fh, 2)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage channels must be non-empty and positive".into());
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 {
            return bad("blocks per stage and input channels must be positive".into());
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return bad("time embedding dimension must be even and >= 2".into());
        }
        if let Some(s) = self.attention_stages.iter().find(|&&s| s >= self.stage_channels.len()) {
            return bad(format!("attention stage {s} does not exist"));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (fh, fw) in self.down_factors() {
            if h % fh != 0 || w % fw != 0 || w < fw {
                return bad(format!(
                    "{}x{} input cannot be downsampled {} times",
                    self.height,
                    self.width,
                    self.stage_channels.len() - 1
                ));
            }
            h /= fh;
            w /= fw;
        }
        if self.height == 0 || self.width == 0 {
            return bad("empty input shape".into());
        }
        Ok(())
    }
}

fn conv3<T: Real>(cin: usize, cout: usize, h: usize, stride: (usize, usize), rng: &mut impl Rng) -> Conv2d<T> {
    // Single-row maps only see the middle kernel row, so use 1x3 there.
    if h == 1 {
        Conv2d::new(cin, cout, (1, 3), (1, stride.1), (0, 1), rng)
    } else {
        Conv2d::new(cin, cout, (3, 3), stride, (1, 1), rng)
    }
}

fn check(x: &Tensor<impl Real>, layer: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("UNet activation after {layer}")))
    }
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    norm1: GroupNorm<T>,
    act1: Silu<T>,
    conv1: Conv2d<T>,
    temb: Linear<T>,
    norm2: GroupNorm<T>,
    act2: Silu<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Real> ResBlock<T> {
    fn new(cin: usize, cout: usize, temb_dim: usize, h: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: GroupNorm::new(cin),
            act1: Silu::new(),
            conv1: conv3(cin, cout, h, (1, 1), rng),
            temb: Linear::new(temb_dim, cout, rng),
            norm2: GroupNorm::new(cout),
            act2: Silu::new(),
            conv2: conv3(cout, cout, h, (1, 1), rng),
            skip: (cin != cout).then(|| Conv2d::pointwise(cin, cout, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, temb: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv1.forward(&self.act1.forward(&self.norm1.forward(x)));
        let e = self.temb.forward(temb);
        let hw = h.hw();
        let c = h.c();
        for i in 0..h.n() {
            let bias = &e.data[i * c..(i + 1) * c];
            for (ch, plane) in h.sample_mut(i).chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[ch]);
            }
        }
        let mut out = self.conv2.forward(&self.act2.forward(&self.norm2.forward(&h)));
        match &mut self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    /// Returns the input gradient and the gradient w.r.t. the shared time
    /// embedding activation.
    fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let dh = self.norm2.backward(&self.act2.backward(&self.conv2.backward(dy)));
        let [n, c, _, _] = dh.shape;
        let hw = dh.hw();
        let mut de = Tensor::zeros([n, c, 1, 1]);
        for i in 0..n {
            for (ch, plane) in dh.sample(i).chunks_exact(hw).enumerate() {
                de.data[i * c + ch] = plane.iter().copied().sum();
            }
        }
        let dtemb = self.temb.backward(&de);
        let mut dx = self.norm1.backward(&self.act1.backward(&self.conv1.backward(&dh)));
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        (dx, dtemb)
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.temb.visit_params(&join(prefix, "temb"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params(&join(prefix, "skip"), f);
        }
    }
}

/// Residual blocks with optional attention after each.
#[derive(Debug, Clone)]
struct Stage<T> {
    blocks: Vec<ResBlock<T>>,
    attn: Vec<Option<Attention<T>>>,
}

impl<T: Real> Stage<T> {
    fn new(cin: usize, cout: usize, n: usize, attn: bool, temb_dim: usize, h: usize, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(n);
        let mut attns = Vec::with_capacity(n);
        for b in 0..n {
            blocks.push(ResBlock::new(if b == 0 { cin } else { cout }, cout, temb_dim, h, rng));
            attns.push(attn.then(|| Attention::new(cout, rng)));
        }
        Self { blocks, attn: attns }
    }

    fn forward(&mut self, mut x: Tensor<T>, temb: &Tensor<T>) -> Tensor<T> {
        for (block, attn) in self.blocks.iter_mut().zip(&mut self.attn) {
            x = block.forward(&x, temb);
            if let Some(a) = attn {
                x = a.forward(&x);
            }
        }
        x
    }

    fn backward(&mut self, mut dy: Tensor<T>, dtemb: &mut Tensor<T>) -> Tensor<T> {
        for (block, attn) in self.blocks.iter_mut().zip(&mut self.attn).rev() {
            if let Some(a) = attn {
                dy = a.backward(&dy);
            }
            let (dx, de) = block.backward(&dy);
            dtemb.add_assign(&de);
            dy = dx;
        }
        dy
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, (b, a)) in self.blocks.iter_mut().zip(&mut self.attn).enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
            if let Some(a) = a {
                a.visit_params(&join(prefix, &format!("attn{i}")), f);
            }
        }
    }
}

/// ε-prediction UNet with sinusoidal time conditioning.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    factors: Vec<(usize, usize)>,
    temb1: Linear<T>,
    temb_act1: Silu<T>,
    temb2: Linear<T>,
    temb_act2: Silu<T>,
    conv_in: Conv2d<T>,
    down: Vec<Stage<T>>,
    downsample: Vec<Conv2d<T>>,
    mid1: ResBlock<T>,
    mid_attn: Option<Attention<T>>,
    mid2: ResBlock<T>,
    up: Vec<Stage<T>>,
    upconv: Vec<Conv2d<T>>,
    out_norm: GroupNorm<T>,
    out_act: Silu<T>,
    conv_out: Conv2d<T>,
}

/// Sinusoidal embedding of step `t`, `dim` values (sines then cosines).
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
    s.into_iter().chain(c).collect()
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.stage_channels;
        let s = ch.len();
        let td = 4 * config.time_embedding_dim;
        let factors = config.down_factors();
        let heights: Vec<usize> = std::iter::once(config.height)
            .chain(factors.iter().scan(config.height, |h, (fh, _)| {
                *h /= fh;
                Some(*h)
            }))
            .collect();
        let cin = config.in_channels + if config.coord_channels { 2 } else { 0 };
        let temb1 = Linear::new(config.time_embedding_dim, td, rng);
        let temb2 = Linear::new(td, td, rng);
        let conv_in = conv3(cin, ch[0], config.height, (1, 1), rng);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for i in 0..s {
            let prev = if i == 0 { ch[0] } else { ch[i - 1] };
            let attn = config.attention_stages.contains(&i);
            down.push(Stage::new(prev, ch[i], config.blocks_per_stage, attn, td, heights[i], rng));
            if i + 1 < s {
                let (fh, fw) = factors[i];
                downsample.push(conv3(ch[i], ch[i], heights[i], (fh, fw), rng));
            }
        }
        let last = ch[s - 1];
        let mid1 = ResBlock::new(last, last, td, heights[s - 1], rng);
        let mid_attn = config.mid_attention.then(|| Attention::new(last, rng));
        let mid2 = ResBlock::new(last, last, td, heights[s - 1], rng);
        let mut up = Vec::new();
        let mut upconv = Vec::new();
        for i in (0..s).rev() {
            let attn = config.attention_stages.contains(&i);
            up.push(Stage::new(2 * ch[i], ch[i], config.blocks_per_stage, attn, td, heights[i], rng));
            if i > 0 {
                upconv.push(conv3(ch[i], ch[i - 1], heights[i], (1, 1), rng));
            }
        }
        let out_norm = GroupNorm::new(ch[0]);
        let conv_out = conv3(ch[0], config.in_channels, config.height, (1, 1), rng);
        Ok(Self {
            config,
            factors,
            temb1,
            temb_act1: Silu::new(),
            temb2,
            temb_act2: Silu::new(),
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upconv,
            out_norm,
            out_act: Silu::new(),
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn with_coords(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.config.coord_channels {
            return x.clone();
        }
        let [n, _, h, w] = x.shape;
        let coord = |i: usize, len: usize| {
            if len == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (len - 1) as f64
            }
        };
        let mut plane = Vec::with_capacity(2 * h * w);
        plane.extend((0..h * w).map(|p| T::lit(coord(p / w, h))));
        plane.extend((0..h * w).map(|p| T::lit(coord(p % w, w))));
        let mut coords = Tensor::zeros([n, 2, h, w]);
        for i in 0..n {
            coords.sample_mut(i).copy_from_slice(&plane);
        }
        concat_channels(x, &coords)
    }

    /// Predicts the noise in `x` (shape `[n, c, h, w]`) at steps `t`.
    pub fn forward(&mut self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let expected = [x.n(), cfg.in_channels, cfg.height, cfg.width];
        if x.shape != expected || t.len() != x.n() {
            return Err(Error::Shape(format!(
                "UNet expects {:?} with {} steps, got {:?} with {}",
                expected,
                x.n(),
                x.shape,
                t.len()
            )));
        }
        let dim = cfg.time_embedding_dim;
        let emb: Vec<T> = t
            .iter()
            .flat_map(|&s| timestep_embedding(s as f64, dim))
            .map(T::lit)
            .collect();
        let emb = Tensor::from_vec([x.n(), dim, 1, 1], emb);
        let temb = self.temb2.forward(&self.temb_act1.forward(&self.temb1.forward(&emb)));
        let temb = self.temb_act2.forward(&temb);
        check(&temb, "time embedding")?;

        let mut h = self.conv_in.forward(&self.with_coords(x));
        let mut skips = Vec::with_capacity(self.down.len());
        for i in 0..self.down.len() {
            h = self.down[i].forward(h, &temb);
            check(&h, &format!("down stage {i}"))?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get_mut(i) {
                h = ds.forward(&h);
            }
        }
        h = self.mid1.forward(&h, &temb);
        if let Some(a) = &mut self.mid_attn {
            h = a.forward(&h);
        }
        h = self.mid2.forward(&h, &temb);
        check(&h, "middle")?;
        let s = self.down.len();
        for (j, stage) in self.up.iter_mut().enumerate() {
            let i = s - 1 - j;
            let skip = skips.pop().expect("one skip per stage");
            h = stage.forward(concat_channels(&h, &skip), &temb);
            check(&h, &format!("up stage {i}"))?;
            if i > 0 {
                let (fh, fw) = self.factors[i - 1];
                h = upsample_nearest(&self.upconv[j].forward(&h), fh, fw);
            }
        }
        let out = self.conv_out.forward(&self.out_act.forward(&self.out_norm.forward(&h)));
        check(&out, "output")?;
        Ok(out)
    }

    /// Accumulates parameter gradients for the last `forward` given the
    /// gradient of the loss w.r.t. its output.
    pub fn backward(&mut self, dy: &Tensor<T>) {
        let td = 4 * self.config.time_embedding_dim;
        let mut dtemb = Tensor::zeros([dy.n(), td, 1, 1]);
        let mut g = self.out_norm.backward(&self.out_act.backward(&self.conv_out.backward(dy)));
        let s = self.down.len();
        let mut dskips = vec![None; s];
        for j in (0..self.up.len()).rev() {
            let i = s - 1 - j;
            if i > 0 {
                let (fh, fw) = self.factors[i - 1];
                g = self.upconv[j].backward(&upsample_nearest_backward(&g, fh, fw));
            }
            let dcat = self.up[j].backward(g, &mut dtemb);
            let c = self.config.stage_channels[i];
            let (dh, dskip) = split_channels(&dcat, c);
            dskips[i] = Some(dskip);
            g = dh;
        }
        let (dx, de) = self.mid2.backward(&g);
        dtemb.add_assign(&de);
        g = dx;
        if let Some(a) = &mut self.mid_attn {
            g = a.backward(&g);
        }
        let (dx, de) = self.mid1.backward(&g);
        dtemb.add_assign(&de);
        g = dx;
        for i in (0..s).rev() {
            if let Some(ds) = self.downsample.get_mut(i) {
                g = ds.backward(&g);
            }
            g.add_assign(dskips[i].as_ref().expect("skip gradient"));
            g = self.down[i].backward(g, &mut dtemb);
        }
        self.conv_in.backward(&g);
        let d = self.temb_act2.backward(&dtemb);
        self.temb1.backward(&self.temb_act1.backward(&self.temb2.backward(&d)));
    }
}

impl<T: Real> Module<T> for UNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.temb1.visit_params(&join(prefix, "temb1"), f);
        self.temb2.visit_params(&join(prefix, "temb2"), f);
        self.conv_in.visit_params(&join(prefix, "conv_in"), f);
        for (i, st) in self.down.iter_mut().enumerate() {
            st.visit_params(&join(prefix, &format!("down{i}")), f);
        }
        for (i, c) in self.downsample.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("downsample{i}")), f);
        }
        self.mid1.visit_params(&join(prefix, "mid1"), f);
        if let Some(a) = &mut self.mid_attn {
            a.visit_params(&join(prefix, "mid_attn"), f);
        }
        self.mid2.visit_params(&join(prefix, "mid2"), f);
        for (j, st) in self.up.iter_mut().enumerate() {
            st.visit_params(&join(prefix, &format!("up{j}")), f);
        }
        for (j, c) in self.upconv.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("upconv{j}")), f);
        }
        self.out_norm.visit_params(&join(prefix, "out_norm"), f);
        self.conv_out.visit_params(&join(prefix, "conv_out"), f);
    }
}
