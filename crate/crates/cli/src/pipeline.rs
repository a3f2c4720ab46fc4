//! Pipeline stages. Each reads its predecessors' artifacts from the output
//! directory and writes its own.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use hsdnet::container::{load_chain, load_iscv, load_tree, save_chain, save_iscv, save_tree};
use hsdnet::subnet::write_sweep_csv;
use hsdnet::trainer::{load_cifar_binary, synth_split, ChannelStats, SynthSpec};
use hsdnet::{
    build_chain, build_hsd, compute_metrics, evaluate, export_dot, extract_subnetwork, iscv_all_layers, subset_sweep,
    train, transfer_all, validate_tree, ChainNet, Dataset, HsdTree, Model, Split,
};

use crate::config::{DatasetSource, PipelineConfig};

/// A stage artifact: file name inside the output directory and the stage
/// that writes it.
#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub file: &'static str,
    pub stage: &'static str,
}

pub const BASE: Stage = Stage { file: "base.hsdt", stage: "train-base" };
pub const ISCV: Stage = Stage { file: "iscv.hsdt", stage: "iscv" };
pub const LAYOUT: Stage = Stage { file: "layout.hsdt", stage: "decompose" };
pub const TRANSFERRED: Stage = Stage { file: "transferred.hsdt", stage: "transfer" };
pub const HSD: Stage = Stage { file: "hsd.hsdt", stage: "finetune" };
pub const SUBNET: Stage = Stage { file: "subnet.hsdt", stage: "subnet" };

pub const BASE_HISTORY: &str = "history_base.csv";
pub const FINETUNE_HISTORY: &str = "history_finetune.csv";
pub const EVAL: &str = "eval.txt";
pub const METRICS: &str = "metrics.txt";
pub const SWEEP: &str = "sweep.csv";
pub const DOT: &str = "tree.dot";

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.check_paths()?;
        fs::create_dir_all(&config.out).with_context(|| format!("cannot create {}", config.out.display()))?;
        Ok(Self { config })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.config.out.join(file)
    }

    /// Path of a prerequisite artifact, or an error naming the stage that
    /// produces it.
    fn require(&self, s: Stage) -> Result<PathBuf> {
        let p = self.path(s.file);
        if !p.exists() {
            bail!("missing {} in {}: run the `{}` stage first", s.file, self.config.out.display(), s.stage);
        }
        Ok(p)
    }

    fn write(&self, file: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(file);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    fn chain(&self) -> Result<ChainNet> {
        let p = self.require(BASE)?;
        load_chain(&p).with_context(|| format!("cannot load {}", p.display()))
    }

    fn tree(&self, s: Stage) -> Result<HsdTree> {
        let p = self.require(s)?;
        load_tree(&p).with_context(|| format!("cannot load {}", p.display()))
    }

    /// Both splits, standardized with statistics of the training split.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (mut train_set, mut test_set) = match &self.config.dataset {
            DatasetSource::Synth { per_class, test_per_class, seed } => {
                let spec = SynthSpec {
                    classes: self.config.net.num_classes,
                    per_class: *per_class,
                    image_size: self.config.net.input_shape[1],
                    seed: *seed,
                };
                (
                    synth_split(spec, Split::Train)?,
                    synth_split(SynthSpec { per_class: *test_per_class, ..spec }, Split::Test)?,
                )
            }
            DatasetSource::Cifar { train, test, class_labels } => (
                load_cifar_binary(train, class_labels.clone(), Split::Train)
                    .with_context(|| format!("cannot load {}", train.display()))?,
                load_cifar_binary(test, class_labels.clone(), Split::Test)
                    .with_context(|| format!("cannot load {}", test.display()))?,
            ),
        };
        if train_set.num_classes() != self.config.net.num_classes {
            bail!(
                "dataset has {} classes, net.num_classes is {}",
                train_set.num_classes(),
                self.config.net.num_classes
            );
        }
        let stats = ChannelStats::from_dataset(&train_set);
        train_set.standardize(&stats);
        test_set.standardize(&stats);
        Ok((train_set, test_set))
    }

    pub fn train_base(&self) -> Result<String> {
        let (train_set, test_set) = self.datasets()?;
        let mut chain = build_chain(&self.config.net, Some(train_set.class_labels().to_vec()), self.config.seed)?;
        let history = train(&mut chain, &train_set, &self.config.train)?;
        save_chain(&self.path(BASE.file), &chain)?;
        self.write(BASE_HISTORY, &history.to_csv())?;
        let (tr, te) = (evaluate(&chain, &train_set, None)?, evaluate(&chain, &test_set, None)?);
        Ok(format!("base chain: train accuracy {tr:.4}, test accuracy {te:.4}, {} params", chain.count_params()))
    }

    pub fn iscv(&self) -> Result<String> {
        let chain = self.chain()?;
        let (train_set, test_set) = self.datasets()?;
        let data = match self.config.iscv_split {
            Split::Train => &train_set,
            Split::Test => &test_set,
        };
        let layers = self.config.policy.required_iscv_layers(chain.arch());
        let set = iscv_all_layers(&chain, data, &layers, self.config.iscv_batch_size)?;
        save_iscv(&self.path(ISCV.file), &set)?;
        Ok(format!("scored layers {layers:?} on {} samples", data.len()))
    }

    pub fn decompose(&self) -> Result<String> {
        let iscv_path = self.require(ISCV)?;
        let chain = self.chain()?;
        let set = load_iscv(&iscv_path).with_context(|| format!("cannot load {}", iscv_path.display()))?;
        let layout = build_hsd(chain.arch(), &set, &self.config.policy)?;
        save_tree(&self.path(LAYOUT.file), &layout)?;
        Ok(format!("tree with {} nodes and {} leaves", layout.len(), layout.leaves().len()))
    }

    pub fn transfer(&self) -> Result<String> {
        let layout = self.tree(LAYOUT)?;
        let chain = self.chain()?;
        let tree = transfer_all(&chain, &layout)?;
        save_tree(&self.path(TRANSFERRED.file), &tree)?;
        Ok(format!("transferred {} params", tree.count_params()))
    }

    pub fn finetune(&self) -> Result<String> {
        let mut tree = self.tree(TRANSFERRED)?;
        let (train_set, test_set) = self.datasets()?;
        let history = hsdnet::finetune(&mut tree, &train_set, &self.config.finetune)?;
        save_tree(&self.path(HSD.file), &tree)?;
        self.write(FINETUNE_HISTORY, &history.to_csv())?;
        Ok(format!("fine-tuned tree: test accuracy {:.4}", evaluate(&tree, &test_set, None)?))
    }

    /// Test accuracy of the base chain and, when present, the fine-tuned
    /// tree, optionally restricted to a class subset.
    pub fn eval(&self, subset: Option<&[usize]>) -> Result<String> {
        let chain = self.chain()?;
        let (_, test_set) = self.datasets()?;
        let data = match subset {
            Some(s) => test_set.filter_classes(s),
            None => test_set,
        };
        let mut text = String::new();
        if let Some(s) = subset {
            text.push_str(&format!("subset={}\n", join(s)));
        }
        text.push_str(&format!("samples={}\n", data.len()));
        text.push_str(&format!("base_accuracy={:.6}\n", evaluate(&chain, &data, subset)?));
        if self.path(HSD.file).exists() {
            let tree = self.tree(HSD)?;
            text.push_str(&format!("hsd_accuracy={:.6}\n", evaluate(&tree, &data, subset)?));
            if let Some(s) = subset {
                let sub = extract_subnetwork(&tree, s)?;
                text.push_str(&format!("subnet_accuracy={:.6}\n", evaluate(&sub, &data, subset)?));
            }
        }
        self.write(EVAL, &text)?;
        Ok(text.trim_end().to_string())
    }

    pub fn subnet(&self, subset: &[usize]) -> Result<String> {
        let tree = self.tree(HSD)?;
        let sub = extract_subnetwork(&tree, subset)?;
        save_tree(&self.path(SUBNET.file), &sub)?;
        let input = sub.input_shape();
        Ok(format!(
            "subnetwork for {{{}}}: {} leaves, {} params, {} MACs",
            join(subset),
            sub.leaves().len(),
            sub.count_params(),
            sub.count_macs(input)?
        ))
    }

    pub fn sweep(&self, cardinalities: &[usize], combos: usize) -> Result<String> {
        let tree = self.tree(HSD)?;
        let (_, test_set) = self.datasets()?;
        let rows = subset_sweep(&tree, &test_set, cardinalities, combos, self.config.seed)?;
        let path = self.path(SWEEP);
        let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        write_sweep_csv(&rows, file)?;
        let full = evaluate(&tree, &test_set, None)?;
        let wins = rows.iter().filter(|r| r.subnet_accuracy >= full).count();
        Ok(format!("{} subsets, {wins} at or above the full-set accuracy {full:.4}", rows.len()))
    }

    /// Chain against the fine-tuned tree, or against its subnetwork when a
    /// subset is given.
    pub fn metrics(&self, subset: Option<&[usize]>) -> Result<String> {
        let chain = self.chain()?;
        let tree = self.tree(HSD)?;
        let (_, test_set) = self.datasets()?;
        let reduced = match subset {
            Some(s) => extract_subnetwork(&tree, s)?,
            None => tree,
        };
        let report = compute_metrics(&chain, &reduced, &test_set, self.config.latency_reps)?;
        let text = report.to_text();
        self.write(METRICS, &text)?;
        Ok(text.trim_end().to_string())
    }

    /// DOT graph of the most advanced tree artifact present.
    pub fn export_dot(&self) -> Result<String> {
        let stage = [HSD, TRANSFERRED, LAYOUT].into_iter().find(|s| self.path(s.file).exists()).unwrap_or(LAYOUT);
        let tree = self.tree(stage)?;
        let report = validate_tree(&tree);
        if !report.ok() {
            bail!("{} fails validation: {:?}", stage.file, report.violations);
        }
        let p = self.write(DOT, &export_dot(&tree))?;
        Ok(format!("{} leaves written to {}", tree.leaves().len(), display(&p)))
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
