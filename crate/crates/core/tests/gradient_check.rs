mod common;

use common::grad::{check, instance};

fn run(patch: usize) {
    let (net, ep, classes) = instance(patch);
    let r = check(net, &ep, &classes);
    eprintln!("patch {patch}: {} scalars, worst relative error {:.2e} at {}", r.checked, r.worst, r.worst_at);
    assert!(r.failures.is_empty(), "{} mismatches, first: {:?}", r.failures.len(), &r.failures[..r.failures.len().min(10)]);
}

// The pixel-resolution instance is run by the acceptance suite; this one
// covers the bilinear upsampling path of coarser patches.
#[test]
fn every_parameter_with_patch_four() {
    run(4);
}
