//! Architecture descriptors and deterministic builders.
//!
//! Descriptor grammar:
//!
//! * `toy-chain[8,16]`: 1 to 4 conv/BN/ReLU stages, global pool, linear head.
//!   Suffix `:plain` drops batch norm (bias-free convs, ReLU only).
//! * `vgg11`, `vgg13`, `vgg16`, `vgg19`: VGG with BN, CIFAR-style single
//!   linear classifier.
//! * `resnet20`, `resnet56`, …: 3-stage basic-block ResNet, depth ≡ 2 (mod 6),
//!   1×1 projection shortcuts where the shape changes.
//! * `resnet18-shape`, `resnet34-shape`: ImageNet-layout basic-block ResNet
//!   (7×7 stem, max pool, four stages). Used for FLOPs analysis.
//!
//! VGG and ResNet descriptors accept a width multiplier suffix, e.g.
//! `vgg16x0.25` or `resnet20x0.5`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ConvRole, Network, NetworkBuilder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArchSpec {
    ToyChain { widths: Vec<usize>, batch_norm: bool },
    Vgg { depth: usize, width: f64 },
    ResNetCifar { depth: usize, width: f64 },
    ResNetImageNet { depth: usize, width: f64 },
}

fn split_width(s: &str) -> Result<(&str, f64)> {
    match s.split_once('x') {
        Some((head, w)) => {
            let width: f64 = w.parse().map_err(|_| Error::UnknownArch(s.into()))?;
            if !(width > 0.0 && width.is_finite()) {
                return Err(Error::InvalidArch { arch: s.into(), reason: "width multiplier must be positive".into() });
            }
            Ok((head, width))
        }
        None => Ok((s, 1.0)),
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("toy-chain[") {
            let (list, suffix) = rest.split_once(']').ok_or_else(|| Error::UnknownArch(s.into()))?;
            let batch_norm = match suffix {
                "" => true,
                ":plain" => false,
                _ => return Err(Error::UnknownArch(s.into())),
            };
            let widths = list
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::UnknownArch(s.into()))?;
            if widths.is_empty() || widths.len() > 4 || widths.contains(&0) {
                return Err(Error::InvalidArch {
                    arch: s.into(),
                    reason: "toy chains have 1 to 4 non-empty conv stages".into(),
                });
            }
            return Ok(ArchSpec::ToyChain { widths, batch_norm });
        }
        if let Some(rest) = s.strip_prefix("vgg") {
            let (depth, width) = split_width(rest)?;
            let depth: usize = depth.parse().map_err(|_| Error::UnknownArch(s.into()))?;
            if vgg_config(depth).is_none() {
                return Err(Error::InvalidArch { arch: s.into(), reason: "VGG depth must be 11, 13, 16 or 19".into() });
            }
            return Ok(ArchSpec::Vgg { depth, width });
        }
        if let Some(rest) = s.strip_prefix("resnet") {
            if let Some((head, tail)) = rest.split_once("-shape") {
                let width = match tail {
                    "" => 1.0,
                    t => split_width(&format!("0{t}"))?.1,
                };
                let depth: usize = head.parse().map_err(|_| Error::UnknownArch(s.into()))?;
                if depth != 18 && depth != 34 {
                    return Err(Error::InvalidArch { arch: s.into(), reason: "ImageNet-layout depth must be 18 or 34".into() });
                }
                return Ok(ArchSpec::ResNetImageNet { depth, width });
            }
            let (depth, width) = split_width(rest)?;
            let depth: usize = depth.parse().map_err(|_| Error::UnknownArch(s.into()))?;
            if depth < 8 || depth % 6 != 2 {
                return Err(Error::InvalidArch {
                    arch: s.into(),
                    reason: format!("depth {depth} is not 6n+2 for a 3-stage basic-block network"),
                });
            }
            return Ok(ArchSpec::ResNetCifar { depth, width });
        }
        Err(Error::UnknownArch(s.into()))
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = |w: f64| if w == 1.0 { String::new() } else { format!("x{w}") };
        match self {
            ArchSpec::ToyChain { widths, batch_norm } => {
                let list: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "toy-chain[{}]{}", list.join(","), if *batch_norm { "" } else { ":plain" })
            }
            ArchSpec::Vgg { depth, width: w } => write!(f, "vgg{depth}{}", width(*w)),
            ArchSpec::ResNetCifar { depth, width: w } => write!(f, "resnet{depth}{}", width(*w)),
            ArchSpec::ResNetImageNet { depth, width: w } => write!(f, "resnet{depth}-shape{}", width(*w)),
        }
    }
}

/// `0` marks a 2×2 max pool.
fn vgg_config(depth: usize) -> Option<&'static [usize]> {
    const VGG11: &[usize] = &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];
    const VGG13: &[usize] = &[64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];
    const VGG16: &[usize] = &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    const VGG19: &[usize] =
        &[64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0];
    match depth {
        11 => Some(VGG11),
        13 => Some(VGG13),
        16 => Some(VGG16),
        19 => Some(VGG19),
        _ => None,
    }
}

fn scaled(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

/// Builds `arch` for images of `input_shape` (`[C, H, W]`). Deterministic in
/// `(arch, input_shape, class_count, seed)`.
pub fn build_model<T: Scalar>(arch: &str, input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Network<T>> {
    let spec: ArchSpec = arch.parse()?;
    build_spec(&spec, input_shape, class_count, seed)
}

pub fn build_spec<T: Scalar>(spec: &ArchSpec, input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Network<T>> {
    if class_count == 0 {
        return Err(Error::InvalidArch { arch: spec.to_string(), reason: "class count must be positive".into() });
    }
    let name = spec.to_string();
    let mut b = NetworkBuilder::<T>::new(&name, input_shape, class_count, seed);
    let input = NetworkBuilder::<T>::INPUT;
    let in_ch = input_shape[0];
    match spec {
        ArchSpec::ToyChain { widths, batch_norm } => {
            let (mut x, mut c) = (input, in_ch);
            for (i, &w) in widths.iter().enumerate() {
                let n = i + 1;
                x = b.conv(&format!("conv{n}"), x, c, w, 3, 1, 1, false, ConvRole::Main);
                if *batch_norm {
                    x = b.batch_norm(&format!("bn{n}"), x, w);
                }
                x = b.relu(&format!("relu{n}"), x);
                c = w;
            }
            let p = b.global_avg_pool("avgpool", x);
            b.linear("fc", p, c, class_count);
        }
        ArchSpec::Vgg { depth, width } => {
            let (mut x, mut c) = (input, in_ch);
            let (mut conv_n, mut pool_n) = (0, 0);
            for &v in vgg_config(*depth).expect("validated on parse") {
                if v == 0 {
                    pool_n += 1;
                    x = b.max_pool(&format!("pool{pool_n}"), x, 2, 2, 0);
                } else {
                    conv_n += 1;
                    let w = scaled(v, *width);
                    x = b.conv(&format!("conv{conv_n}"), x, c, w, 3, 1, 1, false, ConvRole::Main);
                    x = b.batch_norm(&format!("bn{conv_n}"), x, w);
                    x = b.relu(&format!("relu{conv_n}"), x);
                    c = w;
                }
            }
            let p = b.global_avg_pool("avgpool", x);
            b.linear("fc", p, c, class_count);
        }
        ArchSpec::ResNetCifar { depth, width } => {
            let blocks = (depth - 2) / 6;
            let widths = [16, 32, 64].map(|c| scaled(c, *width));
            let stem = b.conv("conv1", input, in_ch, widths[0], 3, 1, 1, false, ConvRole::Main);
            let stem = b.batch_norm("bn1", stem, widths[0]);
            let mut x = b.relu("relu", stem);
            let mut c = widths[0];
            for (s, &w) in widths.iter().enumerate() {
                for blk in 0..blocks {
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    x = basic_block(&mut b, &format!("layer{}.{blk}", s + 1), x, c, w, stride);
                    c = w;
                }
            }
            let p = b.global_avg_pool("avgpool", x);
            b.linear("fc", p, c, class_count);
        }
        ArchSpec::ResNetImageNet { depth, width } => {
            let blocks: [usize; 4] = if *depth == 18 { [2, 2, 2, 2] } else { [3, 4, 6, 3] };
            let widths = [64, 128, 256, 512].map(|c| scaled(c, *width));
            let stem = b.conv("conv1", input, in_ch, widths[0], 7, 2, 3, false, ConvRole::Main);
            let stem = b.batch_norm("bn1", stem, widths[0]);
            let stem = b.relu("relu", stem);
            let mut x = b.max_pool("maxpool", stem, 3, 2, 1);
            let mut c = widths[0];
            for (s, (&w, &n)) in widths.iter().zip(&blocks).enumerate() {
                for blk in 0..n {
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    x = basic_block(&mut b, &format!("layer{}.{blk}", s + 1), x, c, w, stride);
                    c = w;
                }
            }
            let p = b.global_avg_pool("avgpool", x);
            b.linear("fc", p, c, class_count);
        }
    }
    b.finish().map_err(|e| Error::InvalidArch { arch: name, reason: e.to_string() })
}

fn basic_block<T: Scalar>(b: &mut NetworkBuilder<T>, prefix: &str, x: usize, c_in: usize, c_out: usize, stride: usize) -> usize {
    let y = b.conv(&format!("{prefix}.conv1"), x, c_in, c_out, 3, stride, 1, false, ConvRole::Main);
    let y = b.batch_norm(&format!("{prefix}.bn1"), y, c_out);
    let y = b.relu(&format!("{prefix}.relu1"), y);
    let y = b.conv(&format!("{prefix}.conv2"), y, c_out, c_out, 3, 1, 1, false, ConvRole::Main);
    let y = b.batch_norm(&format!("{prefix}.bn2"), y, c_out);
    let shortcut = if stride != 1 || c_in != c_out {
        let s = b.conv(&format!("{prefix}.downsample.0"), x, c_in, c_out, 1, stride, 0, false, ConvRole::Shortcut);
        b.batch_norm(&format!("{prefix}.downsample.1"), s, c_out)
    } else {
        x
    };
    let sum = b.add(&format!("{prefix}.add"), y, shortcut);
    b.relu(&format!("{prefix}.relu2"), sum)
}
