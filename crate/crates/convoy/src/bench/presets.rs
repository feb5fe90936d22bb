//! Named layer-shape presets.
//!
//! Each preset mirrors the convolutional structure of a well-known
//! architecture (channel progression, kernel sizes, block counts) at
//! desk-scale spatial dimensions, with seeded random weights. They exist to
//! drive cost experiments, not to reproduce trained models.

use crate::tensor::ConvShape;

/// One convolution layer in a benchmark plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub label: String,
    pub shape: ConvShape,
}

impl LayerShape {
    pub fn new(label: impl Into<String>, shape: ConvShape) -> Self {
        LayerShape {
            label: label.into(),
            shape,
        }
    }
}

pub const PRESET_NAMES: [&str; 6] = [
    "vgg16",
    "vgg19",
    "resnet50",
    "resnet101",
    "resnet152",
    "cnn3layer",
];

/// Expands a preset name into its layer list. Returns `None` for unknown
/// names.
pub fn preset(name: &str) -> Option<Vec<LayerShape>> {
    match name {
        "vgg16" => Some(vgg_layers(&[2, 2, 3, 3, 3])),
        "vgg19" => Some(vgg_layers(&[2, 2, 4, 4, 4])),
        "resnet50" => Some(resnet_layers(&[3, 4, 6, 3])),
        "resnet101" => Some(resnet_layers(&[3, 4, 23, 3])),
        "resnet152" => Some(resnet_layers(&[3, 8, 36, 3])),
        "cnn3layer" => Some(cnn3_layers()),
        _ => None,
    }
}

fn shape(m: usize, k: usize, c_in: usize, c_out: usize) -> ConvShape {
    ConvShape::new(m, m, k, c_in, c_out).expect("preset shapes are valid")
}

/// VGG-style stacks of 3x3 convolutions; spatial size halves per block.
fn vgg_layers(block_sizes: &[usize; 5]) -> Vec<LayerShape> {
    let widths = [64, 128, 256, 512, 512];
    let spatial = [16, 8, 8, 4, 4];
    let mut layers = Vec::new();
    let mut c_in = 3;
    for (b, (&count, (&width, &m))) in block_sizes
        .iter()
        .zip(widths.iter().zip(spatial.iter()))
        .enumerate()
    {
        for i in 0..count {
            layers.push(LayerShape::new(
                format!("conv{}_{}", b + 1, i + 1),
                shape(m, 3, c_in, width),
            ));
            c_in = width;
        }
    }
    layers
}

/// ResNet bottleneck stages (1x1, 3x3, 1x1 per block); the strided stem and
/// downsampling shortcuts are outside the stride-1 scheme and are skipped.
fn resnet_layers(blocks: &[usize; 4]) -> Vec<LayerShape> {
    let mids = [64, 128, 256, 512];
    let spatial = [16, 8, 8, 4];
    let mut layers = Vec::new();
    let mut c_in = 64;
    for (stage, (&count, (&mid, &m))) in blocks
        .iter()
        .zip(mids.iter().zip(spatial.iter()))
        .enumerate()
    {
        for block in 0..count {
            let tag = format!("conv{}_{}", stage + 2, block + 1);
            layers.push(LayerShape::new(format!("{tag}a"), shape(m, 1, c_in, mid)));
            layers.push(LayerShape::new(format!("{tag}b"), shape(m, 3, mid, mid)));
            layers.push(LayerShape::new(format!("{tag}c"), shape(m, 1, mid, 4 * mid)));
            c_in = 4 * mid;
        }
    }
    layers
}

/// A small three-layer 2D CNN whose consecutive shapes line up, so the
/// layers can be chained with a local activation in between.
fn cnn3_layers() -> Vec<LayerShape> {
    vec![
        LayerShape::new("conv1", shape(16, 3, 4, 16)),
        LayerShape::new("conv2", shape(14, 3, 16, 32)),
        LayerShape::new("conv3", shape(12, 3, 32, 64)),
    ]
}

/// Default input-channel sweep (output channels fixed).
pub fn default_cin_sweep() -> Vec<LayerShape> {
    [1usize, 2, 4, 8, 16, 32, 64]
        .iter()
        .map(|&c| LayerShape::new(format!("cin{c}"), shape(16, 3, c, 16)))
        .collect()
}

/// Default output-channel sweep (input channels fixed).
pub fn default_cout_sweep() -> Vec<LayerShape> {
    [4usize, 8, 16, 32, 64, 128]
        .iter()
        .map(|&c| LayerShape::new(format!("cout{c}"), shape(16, 3, 16, c)))
        .collect()
}

/// Builds a sweep over one channel axis with everything else fixed.
pub fn channel_sweep(axis: SweepAxis, values: &[usize], base: ConvShape) -> Vec<LayerShape> {
    values
        .iter()
        .map(|&v| {
            let mut s = base;
            let label = match axis {
                SweepAxis::CIn => {
                    s.c_in = v;
                    format!("cin{v}")
                }
                SweepAxis::COut => {
                    s.c_out = v;
                    format!("cout{v}")
                }
            };
            LayerShape::new(label, s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    CIn,
    COut,
}
