use serde::{Deserialize, Serialize};

use super::ops::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    GlobalAvgPool,
    Dense,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            in_channels,
            out_channels,
            stride: 1,
            padding: 1,
        }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv1x1,
            in_channels,
            out_channels,
            stride: 1,
            padding: 0,
        }
    }

    fn passthrough(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            stride: 1,
            padding: 0,
        }
    }

    pub fn relu(channels: usize) -> Self {
        Self::passthrough(LayerKind::Relu, channels)
    }

    pub fn maxpool2x2(channels: usize) -> Self {
        Self {
            stride: 2,
            ..Self::passthrough(LayerKind::MaxPool2x2, channels)
        }
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        Self::passthrough(LayerKind::GlobalAvgPool, channels)
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_channels: in_features,
            out_channels: out_features,
            stride: 1,
            padding: 0,
        }
    }

    pub fn softmax(classes: usize) -> Self {
        Self::passthrough(LayerKind::Softmax, classes)
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }

    pub fn has_params(&self) -> bool {
        self.is_conv() || self.kind == LayerKind::Dense
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 3,
            _ => 1,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Same layer with different channel counts, as used by tree nodes
    /// holding a subset of the conventional layer's channels.
    pub fn with_channels(&self, in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ..*self
        }
    }

    /// Weight tensor shape, if the layer is parameterized.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let k = self.kernel();
                Some(vec![self.out_channels, self.in_channels, k, k])
            }
            LayerKind::Dense => Some(vec![self.out_channels, self.in_channels]),
            _ => None,
        }
    }

    pub fn param_count(&self) -> u64 {
        match self.weight_shape() {
            Some(s) => s.iter().product::<usize>() as u64 + self.out_channels as u64,
            None => 0,
        }
    }

    /// Multiply-accumulates for one sample whose input has spatial extent `(h, w)`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let g = self.geometry();
                let ho = g.output_extent(h).unwrap_or(0) as u64;
                let wo = g.output_extent(w).unwrap_or(0) as u64;
                let k = self.kernel() as u64;
                self.out_channels as u64 * self.in_channels as u64 * k * k * ho * wo
            }
            LayerKind::Dense => self.in_channels as u64 * self.out_channels as u64,
            _ => 0,
        }
    }
}
