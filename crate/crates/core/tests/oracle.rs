mod common;

use multifuser::paf::{interrelations, PafParams};
use multifuser::params::Initializer;
use multifuser::Tensor;

#[test]
fn paf_block_matches_scalar_loops() {
    let gap = common::paf_oracle_gap(100, 11);
    assert!(gap < 1e-12, "max gap {gap:e}");
}

#[test]
fn oracle_agrees_on_a_single_modality() {
    // With one token, attention is the identity and the block reduces to
    // `V·U + B` followed by the FFN residual.
    let mut init = Initializer::new(2, 0.3).unwrap();
    let p = PafParams::declare(&mut init, "paf", 4, 2).unwrap();
    let row = vec![0.3, -1.2, 0.8, 0.1];
    let r = interrelations(&Tensor::new(&[1, 4], row.clone()).unwrap(), &p).unwrap();
    assert_eq!(r.to_vec(), vec![1.0, 1.0]);
    let fast = multifuser::paf::paf_block(&Tensor::new(&[1, 4], row.clone()).unwrap(), &p).unwrap();
    let slow = common::paf_oracle(&[row], &common::paf_weights(&p));
    for (a, b) in fast.to_vec().iter().zip(&slow[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}
