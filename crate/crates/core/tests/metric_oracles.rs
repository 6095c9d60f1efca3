mod common;

use common::metric_oracle_suite;

#[test]
fn metrics_match_brute_force_oracles() {
    let rep = metric_oracle_suite(1000, 7);
    assert!(rep.fg_ari <= 1e-12, "fg_ari off by {}", rep.fg_ari);
    assert!(rep.mbo <= 1e-12, "mbo off by {}", rep.mbo);
    assert_eq!(rep.binding_hits, 0.0);
    assert!(rep.miou <= 1e-12, "miou off by {}", rep.miou);
}
