mod common;

use common::{random_tensor, small_chain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hsdnet::graph::tree::chain_shaped_layout;
use hsdnet::graph::{build_chain, NetConfig};
use hsdnet::{export_dot, validate_tree, BackwardOptions, Error, LayerKind, Model, OutputGrad, ProbeSet, Tensor};

fn tiny() -> NetConfig {
    NetConfig { conv_widths: vec![3, 4], pool_after: vec![2], num_classes: 4, input_shape: [2, 4, 4] }
}

#[test]
fn zero_weights_give_uniform_probabilities() {
    let mut net = build_chain(&tiny(), None, 1).unwrap();
    for (_, e) in net.params_mut().iter_mut() {
        e.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        e.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = net.forward(&random_tensor(&mut rng, &[3, 2, 4, 4]), None).unwrap();
    assert!(out.probs.data().iter().all(|&p| p == 0.25));
}

#[test]
fn unit_probes_are_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = small_chain(&mut rng, 3);
    let [c, h, w] = net.input_shape();
    let x = random_tensor(&mut rng, &[2, c, h, w]);
    let mut probes = ProbeSet::new();
    for s in net.arch().stages() {
        probes.insert(s.layer, vec![1.0; s.conv.out_channels]);
    }
    let a = net.forward(&x, None).unwrap();
    let b = net.forward(&x, Some(&probes)).unwrap();
    assert!(a.probs.bit_eq(&b.probs));
    for (site, t) in a.sites() {
        assert!(t.bit_eq(b.activation(site).unwrap()));
    }
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = small_chain(&mut rng, 3);
    let [c, h, w] = net.input_shape();
    let fwd = net.forward(&random_tensor(&mut rng, &[2, c, h, w]), None).unwrap();
    let g = net.backward(&fwd, &OutputGrad::Logits(Tensor::zeros(&[2, 3])), BackwardOptions::default()).unwrap();
    assert!(g.params.iter().all(|(_, e)| e.weight.sum_abs() == 0.0 && e.bias.sum_abs() == 0.0));
}

#[test]
fn dead_channel_has_zero_probe_gradient() {
    let mut net = build_chain(&tiny(), None, 4).unwrap();
    let e = net.params_mut().get_mut("conv2").unwrap();
    let per = e.weight.len() / e.weight.dim(0);
    e.weight.data_mut()[per..2 * per].iter_mut().for_each(|v| *v = 0.0);
    e.bias.data_mut()[1] = -0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut probes = ProbeSet::new();
    probes.insert(2, vec![1.0; 4]);
    let fwd = net.forward(&random_tensor(&mut rng, &[2, 2, 4, 4]), Some(&probes)).unwrap();
    let seed = OutputGrad::Probabilities(random_tensor(&mut rng, &[2, 4]));
    let g = net.backward(&fwd, &seed, BackwardOptions::default()).unwrap();
    assert_eq!(g.probes[&2][1], 0.0);
}

#[test]
fn wrong_input_shape_names_layer() {
    let net = build_chain(&tiny(), None, 5).unwrap();
    let err = net.forward(&Tensor::zeros(&[1, 3, 4, 4]), None).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(err.to_string().contains("layer 0"), "{err}");
}

#[test]
fn stale_forward_is_rejected() {
    let mut net = build_chain(&tiny(), None, 6).unwrap();
    let fwd = net.forward(&Tensor::zeros(&[1, 2, 4, 4]), None).unwrap();
    let e = net.params_mut().get_mut("conv1").unwrap();
    e.weight = Tensor::zeros(&[3, 2, 3, 3]).reshape(vec![3, 2, 9, 1]).unwrap();
    let err = net.backward(&fwd, &OutputGrad::Logits(Tensor::zeros(&[1, 4])), BackwardOptions::default());
    assert!(matches!(err, Err(Error::StaleForward(_))));
}

#[test]
fn chain_construction() {
    let vgg = NetConfig::vgg16(10, 32).architecture(None).unwrap();
    let kinds: Vec<LayerKind> = vgg.layers().iter().map(|l| l.kind).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == LayerKind::Conv3x3).count(), 13);
    assert_eq!(kinds.iter().filter(|&&k| k == LayerKind::MaxPool2x2).count(), 5);

    let minimal = NetConfig { conv_widths: vec![2], pool_after: vec![1], num_classes: 2, input_shape: [1, 2, 2] };
    let net = build_chain(&minimal, None, 0).unwrap();
    assert_eq!(net.arch().layers().len(), 6);
    assert_eq!(net.arch().layers()[0].kind, LayerKind::Conv3x3);

    let a = build_chain(&tiny(), None, 9).unwrap();
    let b = build_chain(&tiny(), None, 9).unwrap();
    assert!(a.params().bit_eq(b.params()));
    assert!(!a.params().bit_eq(build_chain(&tiny(), None, 10).unwrap().params()));

    let odd = NetConfig { input_shape: [2, 5, 5], ..tiny() };
    assert!(build_chain(&odd, None, 0).is_err());
}

#[test]
fn dot_sinks_match_leaves() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let tree = common::random_tree(&mut rng, 8, true);
        let dot = export_dot(&tree);
        assert!(dot.starts_with("digraph hsd {") && dot.trim_end().ends_with('}'));
        let sources: std::collections::BTreeSet<String> =
            dot.lines().filter_map(|l| l.split_once(" -> ")).map(|(a, _)| a.trim().to_string()).collect();
        let nodes: Vec<String> =
            dot.lines().filter(|l| l.contains("[label=")).map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
        let sinks = nodes.iter().filter(|n| !sources.contains(*n)).count();
        assert_eq!(sinks, tree.leaves().len());
        assert_eq!(dot, export_dot(&tree));
    }
    let chain_tree = chain_shaped_layout(build_chain(&tiny(), None, 0).unwrap().arch());
    assert!(validate_tree(&chain_tree).ok());
    assert_eq!(export_dot(&chain_tree).matches(" -> ").count(), 2);
}
