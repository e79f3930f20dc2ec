use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::rng;

pub const EXTRACTOR_SEED: u64 = 0x6a09_e667_f3bc_c908;

/// Frozen feature networks standing in for pretrained vision models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExtractorKind {
    #[serde(rename = "shallow-2")]
    Shallow2,
    #[serde(rename = "shallow-5")]
    Shallow5,
    #[serde(rename = "deep-A")]
    DeepA,
    #[serde(rename = "deep-B")]
    DeepB,
    #[serde(rename = "dist-A")]
    DistA,
    #[serde(rename = "dist-B")]
    DistB,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 6] = [
        Self::Shallow2,
        Self::Shallow5,
        Self::DeepA,
        Self::DeepB,
        Self::DistA,
        Self::DistB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Shallow2 => "shallow-2",
            Self::Shallow5 => "shallow-5",
            Self::DeepA => "deep-A",
            Self::DeepB => "deep-B",
            Self::DistA => "dist-A",
            Self::DistB => "dist-B",
        }
    }

    /// `(output channels, pool after this layer)` per conv layer.
    fn layers(self) -> &'static [(usize, bool)] {
        match self {
            Self::Shallow2 => &[(8, false), (8, true)],
            Self::Shallow5 => &[(8, false), (8, true), (8, false), (8, true), (8, false)],
            Self::DeepA => &[(16, false), (16, true), (16, false), (16, true), (16, false), (16, true)],
            Self::DeepB => &[(32, false), (32, true), (32, false), (32, true)],
            Self::DistA => &[(12, true), (12, true), (12, true)],
            Self::DistB => &[(16, true), (16, false), (16, true), (16, true)],
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("extractor", format!("unknown extractor `{s}`")))
    }
}

#[derive(Debug, Clone)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    /// `(in_ch * 9) x out_ch`, zero mean per output channel.
    kernel: Tensor<f64>,
    pool: bool,
}

/// Stack of 3x3 same-padded convolutions with tanh and 2x2 average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub side: usize,
    convs: Vec<Conv>,
}

impl FeatureExtractor {
    pub fn new(kind: ExtractorKind, side: usize) -> Result<Self> {
        let pools = kind.layers().iter().filter(|l| l.1).count();
        if side == 0 || side % (1 << pools) != 0 {
            return Err(Error::config(
                "image_side",
                format!("{kind} needs a side divisible by {}", 1 << pools),
            ));
        }
        let mut r = rng::stream(EXTRACTOR_SEED, "extractor", &[kind.tag()]);
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for &(out_ch, pool) in kind.layers() {
            let fan_in = in_ch * 9;
            let std = 1.5 / (fan_in as f64).sqrt();
            let mut k: Vec<f64> = (0..fan_in * out_ch)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    std * z
                })
                .collect();
            for o in 0..out_ch {
                let mean = (0..fan_in).map(|i| k[i * out_ch + o]).sum::<f64>() / fan_in as f64;
                for i in 0..fan_in {
                    k[i * out_ch + o] -= mean;
                }
            }
            convs.push(Conv {
                in_ch,
                out_ch,
                kernel: Tensor::new(vec![fan_in, out_ch], k)?,
                pool,
            });
            in_ch = out_ch;
        }
        Ok(Self { kind, side, convs })
    }

    pub fn output_dim(&self) -> usize {
        let pools = self.convs.iter().filter(|c| c.pool).count();
        let s = self.side >> pools;
        s * s * self.convs.last().map_or(1, |c| c.out_ch)
    }

    /// Features of one `side x side` image with pixels in [0, 1].
    pub fn extract(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        if pixels.len() != self.side * self.side {
            return Err(Error::dim("extract", &[pixels.len()], &[self.side, self.side]));
        }
        // Activations are (positions x channels).
        let mut act: Vec<f64> = pixels.iter().map(|p| p - 0.5).collect();
        let mut side = self.side;
        for conv in &self.convs {
            let cols = im2col(&act, side, conv.in_ch);
            let out = Tensor::new(vec![side * side, conv.in_ch * 9], cols)?.matmul(&conv.kernel)?;
            act = out.into_data().into_iter().map(f64::tanh).collect();
            if conv.pool {
                act = avg_pool(&act, side, conv.out_ch);
                side /= 2;
            }
        }
        Ok(act)
    }

    pub fn extract_all(&self, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.extract(im)).collect()
    }
}

fn im2col(act: &[f64], side: usize, ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side * ch * 9];
    let width = ch * 9;
    for y in 0..side {
        for x in 0..side {
            let row = &mut out[(y * side + x) * width..(y * side + x + 1) * width];
            for c in 0..ch {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side {
                            row[c * 9 + dy * 3 + dx] = act[(sy as usize * side + sx as usize) * ch + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn avg_pool(act: &[f64], side: usize, ch: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; half * half * ch];
    for y in 0..half {
        for x in 0..half {
            for c in 0..ch {
                let at = |yy: usize, xx: usize| act[(yy * side + xx) * ch + c];
                out[(y * half + x) * ch + c] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}
