mod common;

use common::gradcheck;

fn assert_report(r: &gradcheck::GradReport, min: usize) {
    assert!(r.passed(min), "{r:?}");
}

#[test]
fn pairwise_loss_gradients() {
    for r in [gradcheck::contrastive(100), gradcheck::triplet(100), gradcheck::quadruplet(100)] {
        assert_report(&r, 100);
    }
}

#[test]
fn cross_entropy_gradients() {
    assert_report(&gradcheck::cross_entropy_check(100), 100);
}

#[test]
fn prototype_loss_gradients() {
    assert_report(&gradcheck::prototype(100), 100);
    assert_report(&gradcheck::pn_network(100), 100);
}

#[test]
fn every_layer_block_gradients() {
    let reports = gradcheck::layers(100);
    assert_eq!(reports.len(), 10);
    for r in &reports {
        assert_report(r, 100);
    }
}

#[test]
fn summary_covers_losses_and_layers() {
    let reports = gradcheck::all(5);
    for r in &reports {
        eprintln!("{:<20} checked {:>5} skipped {:>3} max rel {:.2e}", r.name, r.checked, r.skipped, r.max_rel);
        assert!(r.checked > 0, "{r:?}");
    }
    assert_eq!(reports.len(), 16);
}
