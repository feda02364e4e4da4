mod common;

#[test]
fn cached_decode_matches_recompute() {
    for seed in 0..100 {
        let gap = common::kv_cache_gap(seed).unwrap();
        assert!(gap <= 1e-4, "instance {seed}: max |Δlogit| {gap:.3e}");
    }
}
