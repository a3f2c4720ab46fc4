//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Absent keys take the defaults of [`PipelineConfig::default`],
//! except `decompose.clustering_layers`, which defaults to the conv layers
//! that precede a pooling step of the configured network.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use hsdnet::graph::NetConfig;
use hsdnet::{DecomposePolicy, Split, TrainSchedule};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synth { per_class: usize, test_per_class: usize, seed: u64 },
    Cifar { train: PathBuf, test: PathBuf, class_labels: Option<Vec<String>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub net: NetConfig,
    pub dataset: DatasetSource,
    pub train: TrainSchedule,
    pub finetune: TrainSchedule,
    pub policy: DecomposePolicy,
    /// Split the sensitivity scores are computed on.
    pub iscv_split: Split,
    pub iscv_batch_size: usize,
    pub latency_reps: usize,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// The seeded desk fixture: eight synthetic classes at 16x16.
    fn default() -> Self {
        let net = NetConfig { conv_widths: vec![16, 16, 32, 32], pool_after: vec![2, 4], num_classes: 8, input_shape: [3, 16, 16] };
        let policy = DecomposePolicy::for_arch(&net.architecture(None).expect("default network is valid"));
        let train = TrainSchedule { epochs: 30, batch_size: 16, ..TrainSchedule::default() };
        let finetune = TrainSchedule { epochs: 5, ..train.clone() };
        let mut cfg = Self {
            net,
            dataset: DatasetSource::Synth { per_class: 100, test_per_class: 50, seed: 7 },
            train,
            finetune,
            policy,
            iscv_split: Split::Train,
            iscv_batch_size: 64,
            latency_reps: 20,
            out: PathBuf::from("hsdnet-out"),
            seed: 7,
        };
        cfg.set_seed(7);
        cfg
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Pops `key` from the table and parses it, keeping `current` when absent.
fn take<T: FromStr>(table: &mut BTreeMap<String, String>, key: &str, current: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match table.remove(key) {
        Some(v) => v.parse().map_err(|e| anyhow::anyhow!("config key {key}: cannot parse {v:?}: {e}")),
        None => Ok(current),
    }
}

fn take_list<T: FromStr>(table: &mut BTreeMap<String, String>, key: &str) -> Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    table
        .remove(key)
        .map(|v| parse_list(&v).map_err(|e| anyhow::anyhow!("config key {key}: cannot parse {v:?}: {e}")))
        .transpose()
}

fn take_schedule(table: &mut BTreeMap<String, String>, prefix: &str, base: &TrainSchedule) -> Result<TrainSchedule> {
    Ok(TrainSchedule {
        epochs: take(table, &format!("{prefix}.epochs"), base.epochs)?,
        initial_lr: take(table, &format!("{prefix}.lr"), base.initial_lr)?,
        lr_decay_factor: take(table, &format!("{prefix}.lr_decay_factor"), base.lr_decay_factor)?,
        lr_decay_every: take(table, &format!("{prefix}.lr_decay_every"), base.lr_decay_every)?,
        batch_size: take(table, &format!("{prefix}.batch_size"), base.batch_size)?,
        seed: base.seed,
    })
}

fn write_schedule(out: &mut String, prefix: &str, s: &TrainSchedule) {
    let _ = writeln!(out, "{prefix}.epochs = {}", s.epochs);
    let _ = writeln!(out, "{prefix}.lr = {}", s.initial_lr);
    let _ = writeln!(out, "{prefix}.lr_decay_factor = {}", s.lr_decay_factor);
    let _ = writeln!(out, "{prefix}.lr_decay_every = {}", s.lr_decay_every);
    let _ = writeln!(out, "{prefix}.batch_size = {}", s.batch_size);
}

impl PipelineConfig {
    /// Sets the run seed; it drives weight init, shuffling and sweep draws.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed.wrapping_add(1);
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("config line {}: expected key = value", no + 1))?;
            if table.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                bail!("config line {}: duplicate key {}", no + 1, k.trim());
            }
        }
        let d = Self::default();
        let seed = take(&mut table, "seed", d.seed)?;
        let out = take(&mut table, "out", d.out.display().to_string())?.into();

        let size: usize = take(&mut table, "net.input_size", d.net.input_shape[1])?;
        let net = NetConfig {
            conv_widths: take_list(&mut table, "net.conv_widths")?.unwrap_or(d.net.conv_widths),
            pool_after: take_list(&mut table, "net.pool_after")?.unwrap_or(d.net.pool_after),
            num_classes: take(&mut table, "net.num_classes", d.net.num_classes)?,
            input_shape: [take(&mut table, "net.input_channels", d.net.input_shape[0])?, size, size],
        };
        let arch = net.architecture(None).context("invalid network configuration")?;

        let source: String = take(&mut table, "data.source", "synth".to_string())?;
        let dataset = match source.as_str() {
            "synth" => {
                let DatasetSource::Synth { per_class, test_per_class, seed } = d.dataset else { unreachable!() };
                DatasetSource::Synth {
                    per_class: take(&mut table, "data.per_class", per_class)?,
                    test_per_class: take(&mut table, "data.test_per_class", test_per_class)?,
                    seed: take(&mut table, "data.seed", seed)?,
                }
            }
            "cifar" => {
                let path = |table: &mut BTreeMap<String, String>, key: &str| -> Result<PathBuf> {
                    table.remove(key).map(PathBuf::from).with_context(|| format!("data.source = cifar needs {key}"))
                };
                DatasetSource::Cifar {
                    train: path(&mut table, "data.train")?,
                    test: path(&mut table, "data.test")?,
                    class_labels: take_list(&mut table, "data.class_labels")?,
                }
            }
            other => bail!("config key data.source: expected synth or cifar, got {other:?}"),
        };

        let train = take_schedule(&mut table, "train", &d.train)?;
        let finetune = take_schedule(&mut table, "finetune", &d.finetune)?;
        let base_policy = DecomposePolicy::for_arch(&arch);
        let policy = DecomposePolicy {
            clustering_layers: match take_list::<usize>(&mut table, "decompose.clustering_layers")? {
                Some(layers) => layers.into_iter().collect(),
                None => base_policy.clustering_layers,
            },
            min_classes_per_node: take(&mut table, "decompose.min_classes", base_policy.min_classes_per_node)?,
            keep_fraction: take(&mut table, "decompose.keep_fraction", base_policy.keep_fraction)?,
            trunk_full_width: take(&mut table, "decompose.trunk_full_width", base_policy.trunk_full_width)?,
        };
        let iscv_split = match take(&mut table, "iscv.split", "train".to_string())?.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => bail!("config key iscv.split: expected train or test, got {other:?}"),
        };
        let mut cfg = Self {
            net,
            dataset,
            train,
            finetune,
            policy,
            iscv_split,
            iscv_batch_size: take(&mut table, "iscv.batch_size", d.iscv_batch_size)?,
            latency_reps: take(&mut table, "metrics.latency_reps", d.latency_reps)?,
            out,
            seed,
        };
        cfg.set_seed(seed);
        if let Some(k) = table.keys().next() {
            bail!("unknown config key {k}");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Text that [`PipelineConfig::parse`] maps back to `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "out = {}", self.out.display());
        let _ = writeln!(out, "\n# network");
        let _ = writeln!(out, "net.conv_widths = {}", join(&self.net.conv_widths));
        let _ = writeln!(out, "net.pool_after = {}", join(&self.net.pool_after));
        let _ = writeln!(out, "net.num_classes = {}", self.net.num_classes);
        let _ = writeln!(out, "net.input_channels = {}", self.net.input_shape[0]);
        let _ = writeln!(out, "net.input_size = {}", self.net.input_shape[1]);
        let _ = writeln!(out, "\n# data");
        match &self.dataset {
            DatasetSource::Synth { per_class, test_per_class, seed } => {
                let _ = writeln!(out, "data.source = synth");
                let _ = writeln!(out, "data.per_class = {per_class}");
                let _ = writeln!(out, "data.test_per_class = {test_per_class}");
                let _ = writeln!(out, "data.seed = {seed}");
            }
            DatasetSource::Cifar { train, test, class_labels } => {
                let _ = writeln!(out, "data.source = cifar");
                let _ = writeln!(out, "data.train = {}", train.display());
                let _ = writeln!(out, "data.test = {}", test.display());
                if let Some(labels) = class_labels {
                    let _ = writeln!(out, "data.class_labels = {}", labels.join(","));
                }
            }
        }
        let _ = writeln!(out, "\n# training");
        write_schedule(&mut out, "train", &self.train);
        write_schedule(&mut out, "finetune", &self.finetune);
        let _ = writeln!(out, "\n# decomposition");
        let _ = writeln!(out, "decompose.clustering_layers = {}", join(&self.policy.clustering_layers));
        let _ = writeln!(out, "decompose.min_classes = {}", self.policy.min_classes_per_node);
        let _ = writeln!(out, "decompose.keep_fraction = {}", self.policy.keep_fraction);
        let _ = writeln!(out, "decompose.trunk_full_width = {}", self.policy.trunk_full_width);
        let _ = writeln!(out, "iscv.split = {}", split_name(self.iscv_split));
        let _ = writeln!(out, "iscv.batch_size = {}", self.iscv_batch_size);
        let _ = writeln!(out, "metrics.latency_reps = {}", self.latency_reps);
        out
    }

    /// Fails when a dataset file named by the config does not exist.
    pub fn check_paths(&self) -> Result<()> {
        if let DatasetSource::Cifar { train, test, .. } = &self.dataset {
            for p in [train, test] {
                if !p.exists() {
                    bail!("dataset file {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(PipelineConfig::parse("# nothing\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn clustering_layers_follow_the_network() {
        let cfg = PipelineConfig::parse("net.conv_widths = 4,4,4\nnet.pool_after = 1,3\n").unwrap();
        assert_eq!(cfg.policy.clustering_layers.iter().copied().collect::<Vec<_>>(), vec![1, 3]);
        let chain = PipelineConfig::parse("decompose.clustering_layers =\n").unwrap();
        assert!(chain.policy.clustering_layers.is_empty());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(PipelineConfig::parse("seed 3").is_err());
        assert!(PipelineConfig::parse("seed = x").is_err());
        assert!(PipelineConfig::parse("colour = red").is_err());
        assert!(PipelineConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(PipelineConfig::parse("data.source = cifar").is_err());
    }
}
