mod common;

use common::fd::{self, random_dataset};
use common::small_chain;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hsdnet::sensitivity::{impact_scores, iscv_all_layers, normalize_iscv};
use hsdnet::Model;

#[test]
fn raw_scores_match_finite_difference_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for case in 0..20 {
        let (err, n) = fd::iscv_case(&mut rng);
        assert!(err <= fd::ISCV_TOL, "case {case}: {err:e}");
        checked += n;
    }
    assert!(checked > 100);
}

#[test]
fn dead_channel_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut net = small_chain(&mut rng, 3);
    let entry = net.params_mut().get_mut("conv1").unwrap();
    let per = entry.weight.len() / entry.weight.dim(0);
    entry.weight.data_mut()[..per].iter_mut().for_each(|v| *v = 0.0);
    entry.bias.data_mut()[0] = -1.0;
    let data = random_dataset(&mut rng, &net, 6);
    let raw = impact_scores(&net, &data, 1, 8).unwrap();
    for c in 0..3 {
        assert_eq!(raw.row(c)[0], 0.0);
    }
}

#[test]
fn duplicated_samples_double_scores_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let net = small_chain(&mut rng, 3);
    let data = random_dataset(&mut rng, &net, 8);
    let once = impact_scores(&net, &data, 2, 8).unwrap();
    let twice = impact_scores(&net, &data.concat(&data).unwrap(), 2, 8).unwrap();
    for (a, b) in once.raw.data().iter().zip(twice.raw.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn shuffling_changes_scores_only_by_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let net = small_chain(&mut rng, 3);
    let data = random_dataset(&mut rng, &net, 20);
    let perm: Vec<usize> = (0..20).rev().collect();
    let a = impact_scores(&net, &data, 1, 3).unwrap();
    let b = impact_scores(&net, &data.permuted(&perm), 1, 7).unwrap();
    for (x, y) in a.raw.data().iter().zip(b.raw.data()) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300), "{x} vs {y}");
    }
}

#[test]
fn all_layers_agree_with_single_layer_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let net = small_chain(&mut rng, 3);
    let data = random_dataset(&mut rng, &net, 10);
    let layers: Vec<usize> = (1..=net.arch().depth()).collect();
    let all = iscv_all_layers(&net, &data, &layers, 4).unwrap();
    assert_eq!(all.len(), layers.len());
    for &l in &layers {
        let single = normalize_iscv(&impact_scores(&net, &data, l, 4).unwrap());
        assert_eq!(all[&l], single);
        let m = &all[&l];
        assert_eq!(m.width(), net.arch().width(l));
        for c in 0..3 {
            let row = m.row(c).unwrap();
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if m.raw_row(c).unwrap().iter().any(|&v| v > 0.0) {
                assert_eq!(row.iter().copied().fold(0.0, f64::max), 1.0);
            }
        }
    }
    assert_eq!(all, iscv_all_layers(&net, &data, &layers, 4).unwrap());
}

#[test]
fn class_without_samples_is_absent() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let net = small_chain(&mut rng, 3);
    let data = random_dataset(&mut rng, &net, 9).filter_classes(&[0, 2]);
    let m = &iscv_all_layers(&net, &data, &[1], 4).unwrap()[&1];
    assert!(m.row(1).is_none());
    assert!(m.row(0).is_some() && m.row(2).is_some());
}

#[test]
fn rejects_non_conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let net = small_chain(&mut rng, 3);
    let data = random_dataset(&mut rng, &net, 3);
    assert!(impact_scores(&net, &data, 0, 4).is_err());
    assert!(impact_scores(&net, &data, net.arch().depth() + 1, 4).is_err());
}
