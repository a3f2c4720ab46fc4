mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsdnet::container::{decode, encode, load_chain, load_iscv, load_tree, save_chain, save_iscv, save_tree};
use hsdnet::graph::{build_chain, NetConfig};
use hsdnet::transfer::random_init;
use hsdnet::{validate_tree, Artifact, DecomposePolicy, Error, HsdTree, Model};

fn tree_with_leaves(target: usize) -> HsdTree {
    let arch = NetConfig { conv_widths: vec![4, 4, 4, 4, 4], pool_after: vec![], num_classes: 40, input_shape: [1, 2, 2] }
        .architecture(None)
        .unwrap();
    let policy = DecomposePolicy::for_arch(&arch).with_layers(1..=5);
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = hsdnet::build_hsd(&arch, &common::random_iscv(&mut rng, &arch), &policy).unwrap();
        if tree.leaves().len() == target {
            return random_init(&tree, seed).unwrap();
        }
    }
    unreachable!()
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let chain = build_chain(&NetConfig::vgg16(10, 32), None, 1).unwrap();
    let p = dir.path().join("base.hsdt");
    save_chain(&p, &chain).unwrap();
    let back = load_chain(&p).unwrap();
    assert!(back.params().bit_eq(chain.params()));

    let tree = tree_with_leaves(15);
    let p = dir.path().join("hsd.hsdt");
    save_tree(&p, &tree).unwrap();
    let back = load_tree(&p).unwrap();
    assert_eq!(back, tree);
    assert_eq!(validate_tree(&back), validate_tree(&tree));
    assert!(load_chain(&p).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut iscv = common::random_iscv(&mut rng, tree.arch());
    iscv.get_mut(&2).unwrap().present[3] = false;
    let p = dir.path().join("iscv.hsdt");
    save_iscv(&p, &iscv).unwrap();
    assert_eq!(load_iscv(&p).unwrap(), iscv);
}

#[test]
fn corruption_is_reported() {
    let tree = tree_with_leaves(15);
    let bytes = encode(&Artifact::Tree(tree)).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'Z';
    assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    assert!(matches!(decode(&bytes[..2]), Err(Error::BadMagic(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn encode_decode_is_identity(seed in any::<u64>(), classes in 4usize..=9, kind in 0u8..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let artifact = match kind {
            0 => Artifact::Chain(common::small_chain(&mut rng, classes)),
            1 => {
                let trunk = rng.gen();
                let layout = common::random_tree(&mut rng, classes, trunk);
                Artifact::Tree(if rng.gen() { random_init(&layout, seed).unwrap() } else { layout })
            }
            _ => {
                let arch = common::random_arch(&mut rng, classes);
                Artifact::Iscv(common::random_iscv(&mut rng, &arch))
            }
        };
        let bytes = encode(&artifact).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &artifact);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_fails_cleanly(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes = encode(&Artifact::Chain(common::small_chain(&mut rng, 3))).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        prop_assert!(decode(&bytes[..cut]).is_err());
    }
}
