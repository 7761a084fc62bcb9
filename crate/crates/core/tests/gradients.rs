use charctl_core::gradsuite::{run, PROBES, TOLERANCE};

#[test]
fn every_module_matches_finite_differences() {
    for seed in [0, 1, 17] {
        let checks = run(PROBES, seed).unwrap();
        let names: Vec<_> = checks.iter().map(|c| c.module).collect();
        assert_eq!(names, ["mlp", "skill-embed", "discriminator", "policy", "value"]);
        for c in checks {
            assert_eq!(c.report.probes, PROBES);
            assert!(
                c.report.passes(TOLERANCE),
                "seed {seed} {}: {:.3e} at {:?}",
                c.module,
                c.report.max_rel_err,
                c.report.worst
            );
        }
    }
}
