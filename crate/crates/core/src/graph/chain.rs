//! The conventional single-path network.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::model::{
    check_batch, check_probe, head_backward, head_forward, logits_grad, record_probe, signature,
    stage_backward, stage_forward, StageCache, BackwardOptions, ForwardResult, Model, OutputGrad, ProbeSet,
};
use crate::engine::{ops, GradientStore, LayerKind, LayerSpec, ParamEntry, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Name of the classifier head entry in a chain's `ParamStore`.
pub const HEAD: &str = "dense";

pub fn conv_param_name(layer: usize) -> String {
    format!("conv{layer}")
}

/// Compact description of a chain: conv widths, where the pools go, and the
/// classifier size. Every conv is 3x3 / pad 1 followed by ReLU; the head is
/// global-average-pool + one dense layer + softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub conv_widths: Vec<usize>,
    /// 1-based conv indices that are followed by a 2x2 max-pool.
    pub pool_after: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl NetConfig {
    /// VGG16 feature extractor (13 convs, 5 pools) with a GAP + dense head.
    pub fn vgg16(num_classes: usize, input_size: usize) -> Self {
        Self {
            conv_widths: vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
            pool_after: vec![2, 4, 7, 10, 13],
            num_classes,
            input_shape: [3, input_size, input_size],
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c = self.input_shape[0];
        for (i, &w) in self.conv_widths.iter().enumerate() {
            layers.push(LayerSpec::conv3x3(c, w));
            layers.push(LayerSpec::relu(w));
            if self.pool_after.contains(&(i + 1)) {
                layers.push(LayerSpec::maxpool2x2(w));
            }
            c = w;
        }
        layers.push(LayerSpec::global_avg_pool(c));
        layers.push(LayerSpec::dense(c, self.num_classes));
        layers.push(LayerSpec::softmax(self.num_classes));
        layers
    }

    pub fn architecture(&self, class_labels: Option<Vec<String>>) -> Result<Architecture> {
        let labels = class_labels.unwrap_or_else(|| default_labels(self.num_classes));
        Architecture::new(self.layers(), self.input_shape, labels)
    }
}

pub fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

/// One conv stage of the chain; `layer` is its 1-based depth from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub layer: usize,
    pub conv: LayerSpec,
    pub pool: bool,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

/// Validated layer list of a chain, grouped into conv stages plus a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_labels: Vec<String>,
    stages: Vec<Stage>,
    head: LayerSpec,
}

impl Architecture {
    /// Accepts `(conv, relu, [maxpool2x2])+ , global-avg-pool, dense, softmax`.
    pub fn new(layers: Vec<LayerSpec>, input_shape: [usize; 3], class_labels: Vec<String>) -> Result<Self> {
        let bad = |i: usize, msg: String| Error::InvalidArchitecture(format!("layer {i}: {msg}"));
        {
            let mut seen = std::collections::BTreeSet::new();
            for l in &class_labels {
                if !seen.insert(l) {
                    return Err(Error::InvalidArchitecture(format!("duplicate class label {l:?}")));
                }
            }
        }
        let mut stages = Vec::new();
        let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
        let mut i = 0;
        while i < layers.len() && layers[i].is_conv() {
            let conv = layers[i];
            if conv.in_channels != c {
                return Err(bad(i, format!("expects {} input channels, previous layer gives {c}", conv.in_channels)));
            }
            if conv.kind == LayerKind::Conv3x3 && (conv.stride != 1 || conv.padding != 1) {
                return Err(bad(i, "conv3x3 must use stride 1, padding 1".into()));
            }
            let g = conv.geometry();
            let (ho, wo) = match (g.output_extent(h), g.output_extent(w)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(bad(i, format!("input {h}x{w} too small"))),
            };
            match layers.get(i + 1) {
                Some(l) if l.kind == LayerKind::Relu && l.in_channels == conv.out_channels => {}
                _ => return Err(bad(i + 1, "every conv must be followed by a relu of equal width".into())),
            }
            let pool = matches!(layers.get(i + 2), Some(l) if l.kind == LayerKind::MaxPool2x2);
            let input_hw = (h, w);
            let (mut oh, mut ow) = (ho, wo);
            if pool {
                if ho % 2 != 0 || wo % 2 != 0 {
                    return Err(bad(i + 2, format!("max-pool needs even extents, got {ho}x{wo}")));
                }
                if layers[i + 2].in_channels != conv.out_channels {
                    return Err(bad(i + 2, "pool width differs from conv width".into()));
                }
                oh /= 2;
                ow /= 2;
            }
            stages.push(Stage {
                layer: stages.len() + 1,
                conv,
                pool,
                input_hw,
                output_hw: (oh, ow),
            });
            c = conv.out_channels;
            h = oh;
            w = ow;
            i += if pool { 3 } else { 2 };
        }
        if stages.is_empty() {
            return Err(Error::InvalidArchitecture("no conv layers".into()));
        }
        let tail: Vec<LayerKind> = layers[i..].iter().map(|l| l.kind).collect();
        if tail != [LayerKind::GlobalAvgPool, LayerKind::Dense, LayerKind::Softmax] {
            return Err(bad(i, format!("expected global-avg-pool, dense, softmax head, got {tail:?}")));
        }
        let head = layers[i + 1];
        if head.in_channels != c {
            return Err(bad(i + 1, format!("dense expects {} inputs, features have {c}", head.in_channels)));
        }
        if head.out_channels != class_labels.len() || layers[i + 2].in_channels != class_labels.len() {
            return Err(bad(i + 1, format!(
                "head emits {} classes but {} labels were given",
                head.out_channels,
                class_labels.len()
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            class_labels,
            stages,
            head,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Stage at 1-based depth `layer`.
    pub fn stage(&self, layer: usize) -> Option<&Stage> {
        layer.checked_sub(1).and_then(|i| self.stages.get(i))
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn head(&self) -> &LayerSpec {
        &self.head
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Channel count at depth `layer`; depth 0 is the input image.
    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_shape[0]
        } else {
            self.stages[layer - 1].conv.out_channels
        }
    }

    /// Conv layers immediately followed by a pool.
    pub fn pool_preceding_layers(&self) -> Vec<usize> {
        self.stages.iter().filter(|s| s.pool).map(|s| s.layer).collect()
    }

    /// Spatial extent entering each stage for an input of shape `input`.
    pub fn stage_input_extents(&self, input: [usize; 3]) -> Result<Vec<(usize, usize)>> {
        if input[0] != self.input_shape[0] {
            return Err(Error::shape("0 (input)", &self.input_shape, &input));
        }
        let (mut h, mut w) = (input[1], input[2]);
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            out.push((h, w));
            let g = s.conv.geometry();
            let (hi, wi) = (h, w);
            let bad = || Error::InvalidArchitecture(format!("layer {}: input {hi}x{wi} does not fit", s.layer));
            h = g.output_extent(hi).filter(|&v| v > 0).ok_or_else(bad)?;
            w = g.output_extent(wi).filter(|&v| v > 0).ok_or_else(bad)?;
            if s.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidArchitecture(format!(
                        "layer {}: max-pool needs even extents, got {h}x{w}",
                        s.layer
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(out)
    }

    pub fn count_params(&self) -> u64 {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn count_macs(&self, input: [usize; 3]) -> Result<u64> {
        let extents = self.stage_input_extents(input)?;
        let convs: u64 = self.stages.iter().zip(&extents).map(|(s, &(h, w))| s.conv.macs(h, w)).sum();
        Ok(convs + self.head.macs(1, 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainNet {
    arch: Architecture,
    params: ParamStore,
    classes: Vec<usize>,
}

impl ChainNet {
    /// Checks that every parameterized layer has exactly one correctly shaped entry.
    pub fn from_parts(arch: Architecture, params: ParamStore) -> Result<Self> {
        let mut expected = Vec::new();
        for s in arch.stages() {
            expected.push((conv_param_name(s.layer), s.conv));
        }
        expected.push((HEAD.to_string(), *arch.head()));
        if params.len() != expected.len() {
            return Err(Error::InvalidArchitecture(format!(
                "expected {} parameter entries, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, spec) in &expected {
            let e = params
                .get(name)
                .ok_or_else(|| Error::InvalidArchitecture(format!("missing parameters for {name}")))?;
            let ws = spec.weight_shape().unwrap();
            if e.weight.shape() != ws.as_slice() {
                return Err(Error::shape(name.as_str(), &ws, e.weight.shape()));
            }
            if e.bias.shape() != [spec.out_channels] {
                return Err(Error::shape(name.as_str(), &[spec.out_channels], e.bias.shape()));
            }
        }
        let classes = (0..arch.num_classes()).collect();
        Ok(Self { arch, params, classes })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn into_parts(self) -> (Architecture, ParamStore) {
        (self.arch, self.params)
    }
}

/// Builds a chain with `U(-b, b)` weights and biases, `b = 1/sqrt(fan_in)`.
pub fn build_chain(config: &NetConfig, class_labels: Option<Vec<String>>, seed: u64) -> Result<ChainNet> {
    let arch = config.architecture(class_labels)?;
    let params = init_params(&arch, seed);
    ChainNet::from_parts(arch, params)
}

pub fn init_params(arch: &Architecture, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let init = |spec: &LayerSpec, rng: &mut ChaCha8Rng| {
        let shape = spec.weight_shape().unwrap();
        let fan_in: usize = shape[1..].iter().product();
        let b = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-b, b);
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let bias: Vec<f64> = (0..spec.out_channels).map(|_| dist.sample(rng)).collect();
        ParamEntry {
            weight: Tensor::new(shape, w).unwrap(),
            bias: Tensor::new(vec![spec.out_channels], bias).unwrap(),
        }
    };
    for s in arch.stages() {
        let e = init(&s.conv, &mut rng);
        params.insert(conv_param_name(s.layer), e);
    }
    let e = init(arch.head(), &mut rng);
    params.insert(HEAD, e);
    params
}

impl Model for ChainNet {
    fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    fn output_classes(&self) -> &[usize] {
        &self.classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, batch: &Tensor, probes: Option<&ProbeSet>) -> Result<ForwardResult> {
        check_batch(batch, self.arch.input_shape)?;
        let empty = ProbeSet::new();
        let probes = probes.unwrap_or(&empty);
        for (&site, p) in probes {
            let stage = self
                .arch
                .stage(site)
                .ok_or_else(|| Error::shape(format!("{site} (probe)"), &[self.arch.depth()], &[site]))?;
            check_probe(site, p, stage.conv.out_channels)?;
        }
        let mut sites: BTreeMap<usize, StageCache> = BTreeMap::new();
        for s in &self.arch.stages {
            let x = if s.layer == 1 { batch } else { &sites[&(s.layer - 1)].output };
            let entry = self.params.get(&conv_param_name(s.layer)).unwrap();
            let cache = stage_forward(x, &s.conv, entry, s.pool, probes.get(&s.layer).map(Vec::as_slice));
            sites.insert(s.layer, cache);
        }
        let last = &sites[&self.arch.depth()].output;
        let head = head_forward(last, self.params.get(HEAD).unwrap());
        let logits = head.logits.clone();
        let probs = ops::softmax_forward(&logits);
        let mut heads = BTreeMap::new();
        heads.insert(0, head);
        Ok(ForwardResult {
            input: batch.clone(),
            sites,
            heads,
            probes: probes.clone(),
            signature: signature(&self.params),
            logits,
            probs,
        })
    }

    fn backward(&self, fwd: &ForwardResult, seed: &OutputGrad, opts: BackwardOptions) -> Result<GradientStore> {
        fwd.check_fresh(&self.params)?;
        if fwd.sites.len() != self.arch.depth() || fwd.heads.len() != 1 {
            return Err(Error::StaleForward("forward result was produced by a different network".into()));
        }
        let g_logits = logits_grad(fwd, seed)?;
        let mut grads = GradientStore::default();
        let head_entry = self.params.get(HEAD).unwrap();
        let last = &fwd.sites[&self.arch.depth()].output;
        let (mut g, gp) = head_backward(last.shape(), &fwd.heads[&0], head_entry, &g_logits, opts.param_grads);
        if let Some(p) = gp {
            grads.params.insert(HEAD, p);
        }
        for s in self.arch.stages.iter().rev() {
            let input = if s.layer == 1 { &fwd.input } else { &fwd.sites[&(s.layer - 1)].output };
            let name = conv_param_name(s.layer);
            let entry = self.params.get(&name).unwrap();
            let probe = fwd.probes.get(&s.layer).map(Vec::as_slice);
            let sg = stage_backward(input, &fwd.sites[&s.layer], &s.conv, entry, probe, &g, s.layer > 1, opts.param_grads);
            if let Some(p) = sg.params {
                grads.params.insert(name, p);
            }
            if let Some(gs) = sg.probe {
                record_probe(&mut grads, s.layer, gs);
            }
            if let Some(gi) = sg.input {
                g = gi;
            }
        }
        Ok(grads)
    }

    fn count_params(&self) -> u64 {
        self.arch.count_params()
    }

    fn count_macs(&self, input: [usize; 3]) -> Result<u64> {
        self.arch.count_macs(input)
    }
}
