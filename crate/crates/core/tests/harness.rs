use lamamba::harness::*;
use lamamba::ModelConfig;

#[test]
fn gradcheck_tiny_passes_and_corruption_fails() {
    let cfg = ModelConfig::preset("T").unwrap();
    let t0 = std::time::Instant::now();
    let report = cmd_gradcheck(&cfg, 0, false).unwrap();
    for g in &report.groups {
        println!("{:<40} {:>9} {:.3e}", g.group, g.numel, g.max_rel_err);
    }
    println!("elapsed {:?}", t0.elapsed());
    assert!(report.passed(), "worst {}", report.worst());
    let bad = cmd_gradcheck(&cfg, 0, true).unwrap();
    assert!(!bad.passed());
    assert_eq!(report, cmd_gradcheck(&cfg, 0, false).unwrap());
}
