//! Inference for the small "unet2d-v1" noise predictor.
//!
//! Layout: sinusoidal time embedding of `t − 1` (sin half then cos half)
//! through two linear layers with SiLU between; 3×3 input convolution;
//! per level a residual block, a skip, and 2×2 average pooling except at the
//! last level; a middle residual block; per level in reverse a concatenated
//! skip, a residual block, and nearest 2× upsampling except at level 0;
//! GroupNorm, SiLU and a 3×3 output convolution.
//!
//! Residual block: `h = conv1(silu(gn1(x))) + temb(silu(emb))`,
//! `out = conv2(silu(gn2(h))) + skip(x)` where `skip` is a 1×1 convolution
//! when channel counts differ and the identity otherwise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHITECTURE: &str = "unet2d-v1";
const GN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub image_size: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Format("base_channels must be even and positive".into()));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Format("channel_mults must be non-empty and positive".into()));
        }
        let levels = self.channel_mults.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Format(format!(
                "image size {} is not divisible by {}",
                self.image_size,
                1 << (levels - 1)
            )));
        }
        for m in &self.channel_mults {
            if !(self.base_channels * m).is_multiple_of(self.groups.max(1)) || self.groups == 0 {
                return Err(Error::Format("group count must divide every channel count".into()));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Every tensor the network expects, with its shape.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.base_channels;
        let e = self.temb_dim();
        let mut out = vec![
            ("time.lin1.weight".to_string(), vec![e, b]),
            ("time.lin1.bias".to_string(), vec![e]),
            ("time.lin2.weight".to_string(), vec![e, e]),
            ("time.lin2.bias".to_string(), vec![e]),
            ("conv_in.weight".to_string(), vec![b, 1, 3, 3]),
            ("conv_in.bias".to_string(), vec![b]),
        ];
        let mut res = |prefix: String, cin: usize, cout: usize| {
            out.extend([
                (format!("{prefix}.gn1.weight"), vec![cin]),
                (format!("{prefix}.gn1.bias"), vec![cin]),
                (format!("{prefix}.conv1.weight"), vec![cout, cin, 3, 3]),
                (format!("{prefix}.conv1.bias"), vec![cout]),
                (format!("{prefix}.temb.weight"), vec![cout, e]),
                (format!("{prefix}.temb.bias"), vec![cout]),
                (format!("{prefix}.gn2.weight"), vec![cout]),
                (format!("{prefix}.gn2.bias"), vec![cout]),
                (format!("{prefix}.conv2.weight"), vec![cout, cout, 3, 3]),
                (format!("{prefix}.conv2.bias"), vec![cout]),
            ]);
            if cin != cout {
                out.push((format!("{prefix}.skip.weight"), vec![cout, cin, 1, 1]));
                out.push((format!("{prefix}.skip.bias"), vec![cout]));
            }
        };
        let levels = self.channel_mults.len();
        let mut c = b;
        for l in 0..levels {
            res(format!("down.{l}.res"), c, self.channels(l));
            c = self.channels(l);
        }
        res("mid.res".to_string(), c, c);
        for l in (0..levels).rev() {
            res(format!("up.{l}.res"), c + self.channels(l), self.channels(l));
            c = self.channels(l);
        }
        out.extend([
            ("out.gn.weight".to_string(), vec![b]),
            ("out.gn.bias".to_string(), vec![b]),
            ("conv_out.weight".to_string(), vec![1, b, 3, 3]),
            ("conv_out.bias".to_string(), vec![1]),
        ]);
        out
    }
}

/// Named tensors: shape and row-major data.
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn take(map: &mut TensorMap, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let (s, data) = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(Error::Format(format!(
            "tensor {name} has shape {s:?}, expected {shape:?}"
        )));
    }
    Ok(data)
}

/// Feature map `c × h × w`.
#[derive(Debug, Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Linear {
    out: usize,
    inp: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn load(map: &mut TensorMap, prefix: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            out,
            inp,
            weight: take(map, &format!("{prefix}.weight"), &[out, inp])?,
            bias: take(map, &format!("{prefix}.bias"), &[out])?,
        })
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        (0..self.out)
            .map(|o| {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Conv {
    out: usize,
    inp: usize,
    k: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn load(map: &mut TensorMap, prefix: &str, out: usize, inp: usize, k: usize) -> Result<Self> {
        Ok(Self {
            out,
            inp,
            k,
            weight: take(map, &format!("{prefix}.weight"), &[out, inp, k, k])?,
            bias: take(map, &format!("{prefix}.bias"), &[out])?,
        })
    }

    /// Stride 1, zero padding `k / 2`.
    fn apply(&self, x: &Map) -> Map {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.inp * self.k * self.k;
        let cols_owned;
        let cols: &[f32] = if self.k == 1 {
            &x.data
        } else {
            let pad = (self.k / 2) as isize;
            let mut cols = vec![0.0f32; kk * hw];
            for c in 0..self.inp {
                for di in 0..self.k {
                    for dj in 0..self.k {
                        let row = (c * self.k + di) * self.k + dj;
                        let dst = &mut cols[row * hw..(row + 1) * hw];
                        for i in 0..h {
                            let si = i as isize + di as isize - pad;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + dj as isize - pad;
                                if sj >= 0 && sj < w as isize {
                                    dst[i * w + j] = x.data[(c * h + si as usize) * w + sj as usize];
                                }
                            }
                        }
                    }
                }
            }
            cols_owned = cols;
            &cols_owned
        };
        let mut out = vec![0.0f32; self.out * hw];
        for o in 0..self.out {
            out[o * hw..(o + 1) * hw].fill(self.bias[o]);
        }
        // SAFETY: dimensions match the slice lengths; strides describe
        // row-major matrices of shape (out × kk), (kk × hw) and (out × hw).
        unsafe {
            matrixmultiply::sgemm(
                self.out,
                kk,
                hw,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        Map {
            c: self.out,
            h,
            w,
            data: out,
        }
    }
}

#[derive(Debug, Clone)]
struct GroupNorm {
    groups: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl GroupNorm {
    fn load(map: &mut TensorMap, prefix: &str, c: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            groups,
            weight: take(map, &format!("{prefix}.weight"), &[c])?,
            bias: take(map, &format!("{prefix}.bias"), &[c])?,
        })
    }

    fn apply_silu(&self, x: &Map) -> Map {
        let hw = x.h * x.w;
        let per = x.c / self.groups;
        let mut out = x.data.clone();
        for g in 0..self.groups {
            let span = g * per * hw..(g + 1) * per * hw;
            let vals = &x.data[span.clone()];
            let n = vals.len() as f64;
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + GN_EPS as f64).sqrt();
            for c in g * per..(g + 1) * per {
                let (a, b) = (self.weight[c], self.bias[c]);
                for v in &mut out[c * hw..(c + 1) * hw] {
                    let y = ((*v as f64 - mean) * inv) as f32 * a + b;
                    *v = silu(y);
                }
            }
        }
        Map { data: out, ..x.clone() }
    }
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn load(map: &mut TensorMap, prefix: &str, cin: usize, cout: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gn1: GroupNorm::load(map, &format!("{prefix}.gn1"), cin, groups)?,
            conv1: Conv::load(map, &format!("{prefix}.conv1"), cout, cin, 3)?,
            temb: Linear::load(map, &format!("{prefix}.temb"), cout, temb)?,
            gn2: GroupNorm::load(map, &format!("{prefix}.gn2"), cout, groups)?,
            conv2: Conv::load(map, &format!("{prefix}.conv2"), cout, cout, 3)?,
            skip: if cin != cout {
                Some(Conv::load(map, &format!("{prefix}.skip"), cout, cin, 1)?)
            } else {
                None
            },
        })
    }

    fn apply(&self, x: &Map, emb_act: &[f32]) -> Map {
        let mut h = self.conv1.apply(&self.gn1.apply_silu(x));
        let shift = self.temb.apply(emb_act);
        let hw = h.h * h.w;
        for (c, s) in shift.iter().enumerate() {
            for v in &mut h.data[c * hw..(c + 1) * hw] {
                *v += s;
            }
        }
        let mut out = self.conv2.apply(&self.gn2.apply_silu(&h));
        match &self.skip {
            Some(conv) => {
                let s = conv.apply(x);
                out.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
            }
            None => out.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b),
        }
        out
    }
}

fn avg_pool(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut data = vec![0.0f32; x.c * h * w];
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                let at = |a: usize, b: usize| x.data[(c * x.h + a) * x.w + b];
                data[(c * h + i) * w + j] =
                    0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    Map { c: x.c, h, w, data }
}

fn upsample(x: &Map) -> Map {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut data = vec![0.0f32; x.c * h * w];
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                data[(c * h + i) * w + j] = x.data[(c * x.h + i / 2) * x.w + j / 2];
            }
        }
    }
    Map { c: x.c, h, w, data }
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Map {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    lin1: Linear,
    lin2: Linear,
    conv_in: Conv,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_gn: GroupNorm,
    conv_out: Conv,
}

impl UNet {
    /// Build from named tensors; missing, misshapen or unexpected tensors
    /// are errors.
    pub fn from_tensors(cfg: UNetConfig, mut map: TensorMap) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let e = cfg.temb_dim();
        let g = cfg.groups;
        let levels = cfg.channel_mults.len();
        let lin1 = Linear::load(&mut map, "time.lin1", e, b)?;
        let lin2 = Linear::load(&mut map, "time.lin2", e, e)?;
        let conv_in = Conv::load(&mut map, "conv_in", b, 1, 3)?;
        let mut c = b;
        let mut down = Vec::new();
        for l in 0..levels {
            down.push(ResBlock::load(
                &mut map,
                &format!("down.{l}.res"),
                c,
                cfg.channels(l),
                e,
                g,
            )?);
            c = cfg.channels(l);
        }
        let mid = ResBlock::load(&mut map, "mid.res", c, c, e, g)?;
        let mut up = Vec::new();
        for l in (0..levels).rev() {
            up.push(ResBlock::load(
                &mut map,
                &format!("up.{l}.res"),
                c + cfg.channels(l),
                cfg.channels(l),
                e,
                g,
            )?);
            c = cfg.channels(l);
        }
        let out_gn = GroupNorm::load(&mut map, "out.gn", b, g)?;
        let conv_out = Conv::load(&mut map, "conv_out", 1, b, 3)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            cfg,
            lin1,
            lin2,
            conv_in,
            down,
            mid,
            up,
            out_gn,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn time_embedding(&self, t: usize) -> Vec<f32> {
        let half = self.cfg.base_channels / 2;
        let step = (t as f64) - 1.0;
        let mut emb = vec![0.0f32; 2 * half];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            emb[k] = (step * freq).sin() as f32;
            emb[half + k] = (step * freq).cos() as f32;
        }
        let h: Vec<f32> = self.lin1.apply(&emb).into_iter().map(silu).collect();
        self.lin2.apply(&h)
    }

    /// Predicted noise for one `n × n` image at training step `t` (1-based).
    pub fn forward(&self, x: &[f32], t: usize) -> Result<Vec<f32>> {
        let n = self.cfg.image_size;
        if x.len() != n * n {
            return Err(Error::shape(n * n, x.len()));
        }
        let emb_act: Vec<f32> = self.time_embedding(t).into_iter().map(silu).collect();
        let mut h = self.conv_in.apply(&Map {
            c: 1,
            h: n,
            w: n,
            data: x.to_vec(),
        });
        let levels = self.down.len();
        let mut skips = Vec::with_capacity(levels);
        for (l, block) in self.down.iter().enumerate() {
            h = block.apply(&h, &emb_act);
            skips.push(h.clone());
            if l + 1 < levels {
                h = avg_pool(&h);
            }
        }
        h = self.mid.apply(&h, &emb_act);
        for (k, block) in self.up.iter().enumerate() {
            let l = levels - 1 - k;
            h = block.apply(&concat(&h, &skips[l]), &emb_act);
            if l > 0 {
                h = upsample(&h);
            }
        }
        let out = self.conv_out.apply(&self.out_gn.apply_silu(&h));
        Ok(out.data)
    }
}
