use mobirl_core::bench::{self, make_adaptation_set, verify_split, Regime, SplitConfig};
use mobirl_core::fixtures::reference_catalog;

#[test]
fn reference_split_counts() {
    let cat = reference_catalog();
    let cfg = SplitConfig::default();

    let inst = bench::split(&cat, Regime::UnseenInstance, &cfg).unwrap();
    assert_eq!(inst.report.test.instances, 234);
    assert_eq!(inst.report.pre_dedup_train, 1248);
    assert_eq!(inst.report.train.instances + inst.report.duplicates_removed, 1248);
    assert_eq!((inst.report.train.templates, inst.report.train.apps), (78, 17));

    let tmpl = bench::split(&cat, Regime::UnseenTemplate, &cfg).unwrap();
    assert_eq!((tmpl.report.train.templates, tmpl.report.test.templates), (57, 18));
    assert_eq!((tmpl.report.train.apps, tmpl.report.test.apps), (14, 14));
    assert_eq!(tmpl.report.test.instances, 54);

    let app = bench::split(&cat, Regime::UnseenApp, &cfg).unwrap();
    assert_eq!((app.report.train.apps, app.report.test.apps), (12, 5));

    for sp in [&inst, &tmpl, &app] {
        assert!(verify_split(sp).is_clean(), "{:?}", verify_split(sp));
        assert!(sp.report.difficulty_gap <= 0.05, "{:?} gap {}", sp.regime, sp.report.difficulty_gap);
    }
}

#[test]
fn splits_are_deterministic() {
    let cat = reference_catalog();
    let cfg = SplitConfig::default();
    for r in Regime::ALL {
        let a = serde_json::to_string(&bench::split(&cat, r, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&bench::split(&cat, r, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn reference_adaptation_set() {
    let cat = reference_catalog();
    let sp = bench::split(&cat, Regime::UnseenApp, &SplitConfig::default()).unwrap();
    let seeds: Vec<u64> = (1000..1064).collect();
    let set = make_adaptation_set(&cat, &sp, 8, &seeds).unwrap();
    assert_eq!(set.len(), 8 * 5);
    let test: std::collections::HashSet<_> = sp.test.iter().map(|c| c.instruction.as_str()).collect();
    assert!(set.iter().all(|c| !test.contains(c.instruction.as_str())));
    for a in sp.test_apps() {
        assert_eq!(set.iter().filter(|c| c.app_id == a).count(), 8);
    }
}

#[test]
fn table_lists_all_regimes() {
    let cat = reference_catalog();
    let cfg = SplitConfig::default();
    let splits: Vec<_> = Regime::ALL.iter().map(|&r| bench::split(&cat, r, &cfg).unwrap()).collect();
    let t = bench::format_table(&splits.iter().collect::<Vec<_>>());
    assert!(t.contains("Unseen Instance") && t.contains("Unseen Template") && t.contains("Unseen App"));
    assert!(t.contains("234 / 78 / 17"));
}
