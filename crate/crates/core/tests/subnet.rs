mod common;

use std::collections::BTreeSet;

use common::{random_subset, random_tensor, take_columns};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsdnet::subnet::{compression_rate, compute_metrics, saved_computations, sweep_subsets, write_sweep_csv};
use hsdnet::trainer::{Dataset, Split};
use hsdnet::transfer::random_init;
use hsdnet::{evaluate, extract_subnetwork, subset_sweep, HsdTree, Model};

fn trained_like_tree(rng: &mut ChaCha8Rng, classes: usize) -> HsdTree {
    let layout = common::random_tree(rng, classes, true);
    random_init(&layout, rng.gen()).unwrap()
}

fn dataset_for(rng: &mut ChaCha8Rng, tree: &HsdTree, per_class: usize) -> Dataset {
    let [c, h, w] = tree.input_shape();
    let n = per_class * tree.classes().len();
    let labels = (0..n).map(|i| tree.classes()[i % tree.classes().len()]).collect();
    Dataset::new(random_tensor(rng, &[n, c, h, w]), labels, tree.arch().class_labels().to_vec(), Split::Test).unwrap()
}

#[test]
fn subnetwork_leaf_logits_match_full_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let tree = trained_like_tree(&mut rng, 8);
        let subset = random_subset(&mut rng, tree.classes());
        let sub = extract_subnetwork(&tree, &subset).unwrap();
        let [c, h, w] = tree.input_shape();
        let x = random_tensor(&mut rng, &[2, c, h, w]);
        let full = tree.forward(&x, None).unwrap();
        let part = sub.forward(&x, None).unwrap();
        for leaf in sub.leaves() {
            let a = full.head_logits(leaf).unwrap();
            let b = part.head_logits(leaf).unwrap();
            worst = worst.max(a.max_abs_diff(b));
        }
        let covered = sub.output_classes().to_vec();
        let want = take_columns(&full.logits, tree.output_classes(), &covered);
        let diff = want.iter().zip(part.logits.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        assert!(subset.iter().all(|c| covered.contains(c)));
    }
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn full_subset_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..10 {
        let tree = trained_like_tree(&mut rng, 6);
        let sub = extract_subnetwork(&tree, tree.classes()).unwrap();
        assert_eq!(sub, tree);
        let [c, h, w] = tree.input_shape();
        let x = random_tensor(&mut rng, &[3, c, h, w]);
        assert!(sub.forward(&x, None).unwrap().probs.bit_eq(&tree.forward(&x, None).unwrap().probs));
    }
}

#[test]
fn kept_parameters_are_untouched_and_costs_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..30 {
        let tree = trained_like_tree(&mut rng, 8);
        let small = random_subset(&mut rng, tree.classes());
        let mut large = small.clone();
        large.extend(random_subset(&mut rng, tree.classes()));
        large.sort_unstable();
        large.dedup();
        let (a, b) = (extract_subnetwork(&tree, &small).unwrap(), extract_subnetwork(&tree, &large).unwrap());
        for (name, e) in a.params().iter() {
            let orig = tree.params().get(name).unwrap();
            assert!(e.weight.bit_eq(&orig.weight) && e.bias.bit_eq(&orig.bias));
        }
        let la: BTreeSet<usize> = a.leaves().into_iter().collect();
        let lb: BTreeSet<usize> = b.leaves().into_iter().collect();
        assert!(la.is_subset(&lb));
        let input = tree.input_shape();
        assert!(a.count_params() <= b.count_params());
        assert!(a.count_macs(input).unwrap() <= b.count_macs(input).unwrap());
        assert!(b.count_params() <= tree.count_params());
        assert!(a.count_params() == a.params().numel() as u64);
    }
}

#[test]
fn rejects_bad_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let tree = trained_like_tree(&mut rng, 6);
    assert!(extract_subnetwork(&tree, &[]).is_err());
    assert!(extract_subnetwork(&tree, &[0, 9]).is_err());
    let data = dataset_for(&mut rng, &tree, 2);
    assert!(subset_sweep(&tree, &data, &[7], 5, 0).is_err());
    assert!(subset_sweep(&tree, &data, &[1], 5, 0).is_err());
}

#[test]
fn restricted_evaluation_agrees_between_tree_and_subnetwork() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..10 {
        let tree = trained_like_tree(&mut rng, 8);
        let data = dataset_for(&mut rng, &tree, 3);
        let subset = random_subset(&mut rng, tree.classes());
        let sub = extract_subnetwork(&tree, &subset).unwrap();
        let a = evaluate(&tree, &data, Some(&subset)).unwrap();
        let b = evaluate(&sub, &data, Some(&subset)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn sweep_at_full_cardinality_is_the_full_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let tree = trained_like_tree(&mut rng, 6);
    let data = dataset_for(&mut rng, &tree, 3);
    let rows = subset_sweep(&tree, &data, &[6], 10, 0).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].subnet_accuracy, rows[0].fulltree_accuracy);
    assert_eq!(rows[0].subnet_accuracy, evaluate(&tree, &data, None).unwrap());
    assert_eq!(rows[0].params, tree.count_params());

    let rows = subset_sweep(&tree, &data, &[2, 3], 4, 9).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows, subset_sweep(&tree, &data, &[2, 3], 4, 9).unwrap());
    let mut out = Vec::new();
    write_sweep_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("subset,cardinality,subnet_accuracy,fulltree_accuracy,params,macs"));
    assert_eq!(lines.count(), 8);
    assert!(text.lines().nth(1).unwrap().split(',').next().unwrap().contains(';'));
}

#[test]
fn enumerates_when_few_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let classes: Vec<usize> = (0..5).collect();
    assert_eq!(sweep_subsets(&classes, 2, 10, &mut rng).len(), 10);
    assert_eq!(sweep_subsets(&classes, 2, 100, &mut rng).len(), 10);
    assert_eq!(sweep_subsets(&classes, 2, 3, &mut rng).len(), 3);
}

#[test]
fn metrics_of_identical_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    let tree = trained_like_tree(&mut rng, 6);
    let data = dataset_for(&mut rng, &tree, 2);
    let m = compute_metrics(&tree, &tree, &data, 5).unwrap();
    assert_eq!(m.compression_rate, 1.0);
    assert_eq!(m.saved_computations, 0.0);
    assert_eq!(m.accuracy_drop, 0.0);
    assert_eq!(compression_rate(10, 10), 1.0);
    assert_eq!(saved_computations(10, 10), 0.0);
    assert!(m.to_text().contains("compression_rate=1.0000"));
}
