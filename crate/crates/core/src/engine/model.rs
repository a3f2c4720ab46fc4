//! The forward/backward contract shared by chain and tree networks, and the
//! conv stage / classifier head kernels both are assembled from.
//!
//! A stage is `conv -> relu -> probe scale -> optional 2x2 max-pool`. The
//! probe is a per-channel multiplier, all ones by default, whose gradient
//! measures how much each channel moves the output. ReLU and max-pool are
//! positively homogeneous per channel, so the probe position inside the
//! stage does not change its gradient at scale 1.

use std::collections::BTreeMap;

use super::layer::LayerSpec;
use super::ops;
use super::params::{GradientStore, ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-channel probe scales keyed by probe site (stage layer for a chain,
/// node id for a tree).
pub type ProbeSet = BTreeMap<usize, Vec<f64>>;

/// Seed for the backward pass.
#[derive(Debug, Clone)]
pub enum OutputGrad {
    /// Gradient w.r.t. the softmax probabilities, `[n, classes]`.
    Probabilities(Tensor),
    /// Gradient w.r.t. the pre-softmax logits, `[n, classes]`.
    Logits(Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub param_grads: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { param_grads: true }
    }
}

#[derive(Debug, Clone)]
pub struct StageCache {
    pub(crate) relu_out: Tensor,
    pub(crate) pool_argmax: Option<Vec<usize>>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub(crate) pooled: Tensor,
    pub(crate) logits: Tensor,
}

/// Everything a forward pass produced, kept for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub(crate) input: Tensor,
    pub(crate) sites: BTreeMap<usize, StageCache>,
    pub(crate) heads: BTreeMap<usize, HeadCache>,
    pub(crate) probes: ProbeSet,
    pub(crate) signature: Vec<(String, Vec<usize>)>,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ForwardResult {
    pub fn batch_size(&self) -> usize {
        self.input.dim(0)
    }

    /// Output activation of a stage (chain layer index or tree node id).
    pub fn activation(&self, site: usize) -> Option<&Tensor> {
        self.sites.get(&site).map(|c| &c.output)
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.sites.iter().map(|(k, v)| (*k, &v.output))
    }

    /// Raw logits of head `id` (the single head of a chain has id 0; tree
    /// heads are keyed by leaf node id).
    pub fn head_logits(&self, id: usize) -> Option<&Tensor> {
        self.heads.get(&id).map(|h| &h.logits)
    }

    pub(crate) fn check_fresh(&self, params: &ParamStore) -> Result<()> {
        let now = signature(params);
        if now != self.signature {
            return Err(Error::StaleForward(
                "parameter shapes changed since the forward pass".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn signature(params: &ParamStore) -> Vec<(String, Vec<usize>)> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.weight.shape().to_vec()))
        .collect()
}

pub trait Model {
    /// `[channels, height, width]` of one input sample.
    fn input_shape(&self) -> [usize; 3];

    /// Global class ids of the output columns, ascending.
    fn output_classes(&self) -> &[usize];

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn forward(&self, batch: &Tensor, probes: Option<&ProbeSet>) -> Result<ForwardResult>;

    fn backward(
        &self,
        fwd: &ForwardResult,
        seed: &OutputGrad,
        opts: BackwardOptions,
    ) -> Result<GradientStore>;

    fn count_params(&self) -> u64;

    fn count_macs(&self, input: [usize; 3]) -> Result<u64>;
}

pub(crate) fn check_batch(batch: &Tensor, expected: [usize; 3]) -> Result<()> {
    if batch.rank() != 4 || batch.shape()[1..] != expected {
        let mut want = vec![batch.dim(0)];
        want.extend_from_slice(&expected);
        return Err(Error::shape("0 (input)", &want, batch.shape()));
    }
    Ok(())
}

pub(crate) fn check_probe(site: usize, probe: &[f64], channels: usize) -> Result<()> {
    if probe.len() != channels {
        return Err(Error::shape(
            format!("{site} (probe)"),
            &[channels],
            &[probe.len()],
        ));
    }
    Ok(())
}

pub(crate) fn stage_forward(
    input: &Tensor,
    spec: &LayerSpec,
    params: &ParamEntry,
    pool: bool,
    probe: Option<&[f64]>,
) -> StageCache {
    let z = ops::conv2d_forward(input, &params.weight, params.bias.data(), spec.geometry());
    let relu_out = ops::relu_forward(&z);
    let scaled = match probe {
        Some(s) => ops::channel_scale_forward(&relu_out, s),
        None => relu_out.clone(),
    };
    let (output, pool_argmax) = if pool {
        let (o, a) = ops::maxpool2x2_forward(&scaled);
        (o, Some(a))
    } else {
        (scaled, None)
    };
    StageCache {
        relu_out,
        pool_argmax,
        output,
    }
}

pub(crate) struct StageGrads {
    pub(crate) input: Option<Tensor>,
    pub(crate) params: Option<ParamEntry>,
    pub(crate) probe: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn stage_backward(
    input: &Tensor,
    cache: &StageCache,
    spec: &LayerSpec,
    params: &ParamEntry,
    probe: Option<&[f64]>,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> StageGrads {
    let g_scaled = match &cache.pool_argmax {
        Some(arg) => ops::maxpool2x2_backward(cache.relu_out.shape(), arg, grad_out),
        None => grad_out.clone(),
    };
    let (g_relu, g_probe) = match probe {
        Some(s) => {
            let (gi, gs) = ops::channel_scale_backward(&cache.relu_out, s, &g_scaled);
            (gi, Some(gs))
        }
        None => (g_scaled, None),
    };
    let g_z = ops::relu_backward(&cache.relu_out, &g_relu);
    let conv = ops::conv2d_backward(input, &params.weight, &g_z, spec.geometry(), want_input, want_params);
    StageGrads {
        input: conv.input,
        params: match (conv.weight, conv.bias) {
            (Some(w), Some(b)) => Some(ParamEntry {
                weight: w,
                bias: Tensor::new(vec![b.len()], b).unwrap(),
            }),
            _ => None,
        },
        probe: g_probe,
    }
}

pub(crate) fn head_forward(x: &Tensor, params: &ParamEntry) -> HeadCache {
    let pooled = ops::global_avg_pool_forward(x);
    let logits = ops::dense_forward(&pooled, &params.weight, params.bias.data());
    HeadCache { pooled, logits }
}

pub(crate) fn head_backward(
    input_shape: &[usize],
    cache: &HeadCache,
    params: &ParamEntry,
    grad_logits: &Tensor,
    want_params: bool,
) -> (Tensor, Option<ParamEntry>) {
    let d = ops::dense_backward(&cache.pooled, &params.weight, grad_logits, want_params);
    let gx = ops::global_avg_pool_backward(input_shape, &d.input);
    let p = match (d.weight, d.bias) {
        (Some(w), Some(b)) => Some(ParamEntry {
            weight: w,
            bias: Tensor::new(vec![b.len()], b).unwrap(),
        }),
        _ => None,
    };
    (gx, p)
}

/// Converts the backward seed into a gradient w.r.t. logits.
pub(crate) fn logits_grad(fwd: &ForwardResult, seed: &OutputGrad) -> Result<Tensor> {
    let (t, name) = match seed {
        OutputGrad::Probabilities(g) => (g, "output (probabilities)"),
        OutputGrad::Logits(g) => (g, "output (logits)"),
    };
    if t.shape() != fwd.probs.shape() {
        return Err(Error::shape(name, fwd.probs.shape(), t.shape()));
    }
    Ok(match seed {
        OutputGrad::Probabilities(g) => ops::softmax_backward(&fwd.probs, g),
        OutputGrad::Logits(g) => g.clone(),
    })
}

/// Batch-sums per-sample probe gradients into a `GradientStore`.
pub(crate) fn record_probe(grads: &mut GradientStore, site: usize, per_sample: Tensor) {
    let c = per_sample.dim(1);
    let mut sum = vec![0.0; c];
    for row in per_sample.data().chunks(c.max(1)) {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    grads.probes.insert(site, sum);
    grads.probes_per_sample.insert(site, per_sample);
}
