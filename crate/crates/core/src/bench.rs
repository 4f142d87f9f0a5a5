//! Train/test context splits for the three unseen regimes (instance,
//! template, app), with seed bookkeeping, instruction-level dedup and
//! difficulty balancing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{TaskCatalog, TaskTemplate, TemplateError};
use crate::cmdp::{Context, Difficulty};
use crate::hashing;

pub const DEFAULT_EVAL_SEEDS: [u64; 3] = [30, 7, 1234];
pub const DEFAULT_TRAIN_SEEDS: [u64; 16] = [
    1, 2, 3, 4, 5, 6, 8, 9, 12, 123, 12345, 123456, 1234567, 12345678, 123456789, 1234567890,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    UnseenInstance,
    UnseenTemplate,
    UnseenApp,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::UnseenInstance, Regime::UnseenTemplate, Regime::UnseenApp];

    pub fn label(self) -> &'static str {
        match self {
            Regime::UnseenInstance => "Unseen Instance",
            Regime::UnseenTemplate => "Unseen Template",
            Regime::UnseenApp => "Unseen App",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "unseen-instance" | "instance" => Ok(Regime::UnseenInstance),
            "unseen-template" | "template" => Ok(Regime::UnseenTemplate),
            "unseen-app" | "app" => Ok(Regime::UnseenApp),
            other => Err(format!("unknown regime `{other}` (expected unseen-instance, unseen-template or unseen-app)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("eval and train seed lists overlap on {0:?}")]
    SeedOverlap(Vec<u64>),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("app {app}: only {found} distinct adaptation instances, {needed} required")]
    AdaptationSet { app: String, found: usize, needed: usize },
    #[error("expected a {expected:?} split, got {found:?}")]
    WrongRegime { expected: Regime, found: Regime },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// train:test ratio, 3:1 by default.
    pub ratio: (u32, u32),
    pub tolerance: f64,
    pub eval_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    /// Seeds the within-app template choice and the greedy app search.
    pub search_seed: u64,
    /// App counts up to this use exhaustive subset search.
    pub exhaustive_app_limit: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: (3, 1),
            tolerance: 0.05,
            eval_seeds: DEFAULT_EVAL_SEEDS.to_vec(),
            train_seeds: DEFAULT_TRAIN_SEEDS.to_vec(),
            search_seed: 0,
            exhaustive_app_limit: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub instances: usize,
    pub templates: usize,
    pub apps: usize,
    /// Mean difficulty over the distinct templates on this side.
    pub mean_difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: SideStats,
    pub test: SideStats,
    pub pre_dedup_train: usize,
    pub duplicates_removed: usize,
    pub excluded_templates: Vec<String>,
    pub excluded_apps: Vec<String>,
    pub difficulty_gap: f64,
    pub tolerance: f64,
    pub balanced: bool,
    pub instance_overlap: bool,
    pub template_overlap: bool,
    pub app_overlap: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub regime: Regime,
    pub train: Vec<Context>,
    pub test: Vec<Context>,
    pub eval_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    pub report: SplitReport,
}

impl SplitSpec {
    pub fn train_apps(&self) -> BTreeSet<&str> {
        self.train.iter().map(|c| c.app_id.as_str()).collect()
    }

    pub fn test_apps(&self) -> BTreeSet<&str> {
        self.test.iter().map(|c| c.app_id.as_str()).collect()
    }
}

fn check_seeds(cfg: &SplitConfig) -> Result<(), BenchError> {
    let eval: HashSet<u64> = cfg.eval_seeds.iter().copied().collect();
    let mut overlap: Vec<u64> = cfg.train_seeds.iter().copied().filter(|s| eval.contains(s)).collect();
    overlap.sort_unstable();
    overlap.dedup();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(BenchError::SeedOverlap(overlap))
    }
}

fn usable_templates(catalog: &TaskCatalog) -> (Vec<(String, TaskTemplate)>, Vec<String>) {
    let mut usable = Vec::new();
    let mut excluded = Vec::new();
    for (app, t) in catalog.templates() {
        if t.parameterizable {
            usable.push((app.to_string(), t.clone()));
        } else {
            excluded.push(t.template_id.clone());
        }
    }
    (usable, excluded)
}

/// Instantiates templates x seeds. When `dedup` is set, instances whose
/// instruction is already in `blocked` or earlier in the output are dropped.
fn instantiate_side(
    templates: &[(String, TaskTemplate)],
    seeds: &[u64],
    blocked: &HashSet<String>,
    dedup: bool,
) -> Result<(Vec<Context>, usize), BenchError> {
    let mut out = Vec::with_capacity(templates.len() * seeds.len());
    let mut seen: HashSet<String> = HashSet::new();
    let mut removed = 0;
    for (app, t) in templates {
        for &seed in seeds {
            let ctx = Context::new(app, t, seed)?;
            if dedup && (blocked.contains(&ctx.instruction) || !seen.insert(ctx.instruction.clone())) {
                removed += 1;
                continue;
            }
            out.push(ctx);
        }
    }
    Ok((out, removed))
}

fn side_stats(contexts: &[Context]) -> SideStats {
    let mut templates: BTreeMap<&str, Difficulty> = BTreeMap::new();
    let mut apps = BTreeSet::new();
    for c in contexts {
        templates.insert(&c.template_id, c.difficulty);
        apps.insert(c.app_id.as_str());
    }
    let mean = if templates.is_empty() {
        0.0
    } else {
        templates.values().map(|d| f64::from(d.level())).sum::<f64>() / templates.len() as f64
    };
    SideStats {
        instances: contexts.len(),
        templates: templates.len(),
        apps: apps.len(),
        mean_difficulty: mean,
    }
}

struct Assembled {
    train: Vec<Context>,
    test: Vec<Context>,
    pre_dedup_train: usize,
    duplicates_removed: usize,
}

fn assemble(
    train_templates: &[(String, TaskTemplate)],
    test_templates: &[(String, TaskTemplate)],
    cfg: &SplitConfig,
) -> Result<Assembled, BenchError> {
    let (test, _) = instantiate_side(test_templates, &cfg.eval_seeds, &HashSet::new(), false)?;
    let blocked: HashSet<String> = test.iter().map(|c| c.instruction.clone()).collect();
    let (train, removed) = instantiate_side(train_templates, &cfg.train_seeds, &blocked, true)?;
    Ok(Assembled {
        pre_dedup_train: train_templates.len() * cfg.train_seeds.len(),
        duplicates_removed: removed,
        train,
        test,
    })
}

fn finish(
    regime: Regime,
    a: Assembled,
    cfg: &SplitConfig,
    excluded_templates: Vec<String>,
    excluded_apps: Vec<String>,
    mut warnings: Vec<String>,
) -> SplitSpec {
    let train = side_stats(&a.train);
    let test = side_stats(&a.test);
    let gap = if train.templates == 0 || test.templates == 0 {
        warnings.push(format!(
            "{} side is empty after dedup; difficulty balance not applicable",
            if train.templates == 0 { "train" } else { "test" }
        ));
        0.0
    } else {
        (train.mean_difficulty - test.mean_difficulty).abs()
    };
    let balanced = gap <= cfg.tolerance + 1e-12;
    if !balanced {
        warnings.push(format!(
            "difficulty gap {gap:.3} exceeds tolerance {:.3}",
            cfg.tolerance
        ));
    }
    let report = SplitReport {
        train,
        test,
        pre_dedup_train: a.pre_dedup_train,
        duplicates_removed: a.duplicates_removed,
        excluded_templates,
        excluded_apps,
        difficulty_gap: gap,
        tolerance: cfg.tolerance,
        balanced,
        instance_overlap: false,
        template_overlap: regime == Regime::UnseenInstance,
        app_overlap: regime != Regime::UnseenApp,
        warnings,
    };
    SplitSpec {
        regime,
        train: a.train,
        test: a.test,
        eval_seeds: cfg.eval_seeds.clone(),
        train_seeds: cfg.train_seeds.clone(),
        report,
    }
}

/// Same templates and apps on both sides; instances differ by seed.
pub fn split_unseen_instance(catalog: &TaskCatalog, cfg: &SplitConfig) -> Result<SplitSpec, BenchError> {
    check_seeds(cfg)?;
    let (usable, excluded) = usable_templates(catalog);
    if usable.is_empty() {
        return Err(BenchError::Catalog("no parameterizable templates".into()));
    }
    let a = assemble(&usable, &usable, cfg)?;
    Ok(finish(Regime::UnseenInstance, a, cfg, excluded, Vec::new(), Vec::new()))
}

/// Number of test items out of `n` under a train:test ratio, keeping at
/// least one item on each side.
pub fn test_share(n: usize, ratio: (u32, u32)) -> usize {
    if n < 2 {
        return 0;
    }
    let (tr, te) = (f64::from(ratio.0), f64::from(ratio.1));
    let raw = (n as f64 * te / (tr + te)).round() as usize;
    raw.clamp(1, n - 1)
}

/// Difficulty counts as (easy, medium, hard).
type Counts = [u32; 3];

fn counts_of<'a>(ds: impl Iterator<Item = &'a Difficulty>) -> Counts {
    let mut c = [0u32; 3];
    for d in ds {
        c[usize::from(d.level()) - 1] += 1;
    }
    c
}

fn sum_of(c: &Counts) -> u32 {
    c[0] + 2 * c[1] + 3 * c[2]
}

fn total_of(c: &Counts) -> u32 {
    c[0] + c[1] + c[2]
}

fn mean_of(c: &Counts) -> f64 {
    let n = total_of(c);
    if n == 0 {
        0.0
    } else {
        f64::from(sum_of(c)) / f64::from(n)
    }
}

fn proportion_distance(a: &Counts, b: &Counts) -> f64 {
    let (na, nb) = (f64::from(total_of(a)).max(1.0), f64::from(total_of(b)).max(1.0));
    (0..3).map(|i| (f64::from(a[i]) / na - f64::from(b[i]) / nb).abs()).sum()
}

/// Whether a test/train difficulty assignment for one app keeps, for every
/// medium or hard test template, a train template of equal or lower difficulty.
pub fn guard_satisfied(test: &Counts, train: &Counts) -> bool {
    let lowest_guarded_test = if test[1] > 0 {
        Some(2)
    } else if test[2] > 0 {
        Some(3)
    } else {
        None
    };
    match lowest_guarded_test {
        None => true,
        Some(level) => (0..level).any(|i| train[i] > 0),
    }
}

fn feasible_test_counts(avail: &Counts, n_test: u32) -> Vec<Counts> {
    let mut out = Vec::new();
    for e in 0..=avail[0].min(n_test) {
        for m in 0..=avail[1].min(n_test - e) {
            let h = n_test - e - m;
            if h > avail[2] {
                continue;
            }
            let test = [e, m, h];
            let train = [avail[0] - e, avail[1] - m, avail[2] - h];
            if guard_satisfied(&test, &train) {
                out.push(test);
            }
        }
    }
    out
}

fn group_by_app(usable: &[(String, TaskTemplate)]) -> Vec<(String, Vec<TaskTemplate>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_app: HashMap<String, Vec<TaskTemplate>> = HashMap::new();
    for (app, t) in usable {
        if !by_app.contains_key(app) {
            order.push(app.clone());
        }
        by_app.entry(app.clone()).or_default().push(t.clone());
    }
    order
        .into_iter()
        .map(|a| {
            let ts = by_app.remove(&a).unwrap_or_default();
            (a, ts)
        })
        .collect()
}

/// Per-app template partition: single-template apps are dropped, each
/// remaining app contributes its ratio share of test templates, and the
/// difficulty mix of the test side is chosen to minimize the train/test
/// mean-difficulty gap (ties broken by difficulty-proportion distance).
pub fn split_unseen_template(catalog: &TaskCatalog, cfg: &SplitConfig) -> Result<SplitSpec, BenchError> {
    check_seeds(cfg)?;
    let (usable, mut excluded_templates) = usable_templates(catalog);
    let mut excluded_apps = Vec::new();
    let mut warnings = Vec::new();

    struct AppPlan {
        app: String,
        templates: Vec<TaskTemplate>,
        options: Vec<Counts>,
    }
    let mut plans = Vec::new();
    for (app, templates) in group_by_app(&usable) {
        if templates.len() < 2 {
            excluded_apps.push(app);
            excluded_templates.extend(templates.iter().map(|t| t.template_id.clone()));
            continue;
        }
        let avail = counts_of(templates.iter().map(|t| &t.difficulty));
        let n_test = test_share(templates.len(), cfg.ratio) as u32;
        let options = feasible_test_counts(&avail, n_test);
        if options.is_empty() {
            warnings.push(format!("app {app}: no assignment satisfies the difficulty guard; excluded"));
            excluded_apps.push(app);
            excluded_templates.extend(templates.iter().map(|t| t.template_id.clone()));
            continue;
        }
        plans.push(AppPlan { app, templates, options });
    }
    if plans.is_empty() {
        return Err(BenchError::Catalog("no app has two or more usable templates".into()));
    }

    // DP over apps on (easy, medium) test totals; hard follows from the fixed test size.
    let mut states: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    states.insert((0, 0), Vec::new());
    for plan in &plans {
        let mut next: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (&(e, m), path) in &states {
            for (i, opt) in plan.options.iter().enumerate() {
                let key = (e + opt[0], m + opt[1]);
                next.entry(key).or_insert_with(|| {
                    let mut p = path.clone();
                    p.push(i);
                    p
                });
            }
        }
        states = next;
    }
    let overall = plans.iter().fold([0u32; 3], |mut acc, p| {
        let c = counts_of(p.templates.iter().map(|t| &t.difficulty));
        for i in 0..3 {
            acc[i] += c[i];
        }
        acc
    });
    let n_test_total: u32 = plans.iter().map(|p| p.options[0].iter().sum::<u32>()).sum();
    let mut best: Option<((f64, f64), &Vec<usize>)> = None;
    for (&(e, m), path) in &states {
        let test = [e, m, n_test_total - e - m];
        let train = [overall[0] - test[0], overall[1] - test[1], overall[2] - test[2]];
        let key = ((mean_of(&train) - mean_of(&test)).abs(), proportion_distance(&train, &test));
        let better = match &best {
            None => true,
            Some((k, _)) => key.0 < k.0 - 1e-12 || ((key.0 - k.0).abs() <= 1e-12 && key.1 < k.1 - 1e-12),
        };
        if better {
            best = Some((key, path));
        }
    }
    let (_, path) = best.expect("at least one DP state");

    let mut train_t = Vec::new();
    let mut test_t = Vec::new();
    for (plan, &choice) in plans.iter().zip(path.iter()) {
        let want = plan.options[choice];
        let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(&[cfg.search_seed, hashing::fnv1a_str(&plan.app)]));
        let mut chosen: HashSet<&str> = HashSet::new();
        for (level, &k) in want.iter().enumerate() {
            let mut group: Vec<&TaskTemplate> = plan
                .templates
                .iter()
                .filter(|t| usize::from(t.difficulty.level()) == level + 1)
                .collect();
            group.shuffle(&mut rng);
            for t in group.into_iter().take(k as usize) {
                chosen.insert(&t.template_id);
            }
        }
        for t in &plan.templates {
            if chosen.contains(t.template_id.as_str()) {
                test_t.push((plan.app.clone(), t.clone()));
            } else {
                train_t.push((plan.app.clone(), t.clone()));
            }
        }
    }
    let a = assemble(&train_t, &test_t, cfg)?;
    Ok(finish(Regime::UnseenTemplate, a, cfg, excluded_templates, excluded_apps, warnings))
}

/// Objective for an app partition: (proportion distance, mean gap).
pub fn app_partition_score(train: &Counts, test: &Counts) -> (f64, f64) {
    (proportion_distance(train, test), (mean_of(train) - mean_of(test)).abs())
}

fn score_subset(app_counts: &[Counts], test_mask: &[bool]) -> (f64, f64) {
    let mut train = [0u32; 3];
    let mut test = [0u32; 3];
    for (c, &is_test) in app_counts.iter().zip(test_mask) {
        let side = if is_test { &mut test } else { &mut train };
        for i in 0..3 {
            side[i] += c[i];
        }
    }
    app_partition_score(&train, &test)
}

fn lex_less(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.0 - 1e-12 || ((a.0 - b.0).abs() <= 1e-12 && a.1 < b.1 - 1e-12)
}

/// Chooses which apps go to the test side. Exhaustive over all subsets of
/// the target size up to `exhaustive_app_limit` apps, seeded swap search beyond.
pub fn search_app_partition(app_counts: &[Counts], n_test: usize, cfg: &SplitConfig) -> Vec<bool> {
    let n = app_counts.len();
    if n <= cfg.exhaustive_app_limit {
        let mut idx: Vec<usize> = (0..n_test).collect();
        let mut best_mask = vec![false; n];
        let mut best_score = (f64::INFINITY, f64::INFINITY);
        loop {
            let mut mask = vec![false; n];
            for &i in &idx {
                mask[i] = true;
            }
            let s = score_subset(app_counts, &mask);
            if lex_less(s, best_score) {
                best_score = s;
                best_mask = mask;
            }
            // next combination in lexicographic order
            let mut i = n_test;
            loop {
                if i == 0 {
                    return best_mask;
                }
                i -= 1;
                if idx[i] < n - n_test + i {
                    idx[i] += 1;
                    for j in i + 1..n_test {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.search_seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut mask = vec![false; n];
        for &i in order.iter().take(n_test) {
            mask[i] = true;
        }
        let mut score = score_subset(app_counts, &mask);
        loop {
            let mut best: Option<((f64, f64), usize, usize)> = None;
            let ins: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let outs: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
            for &a in &ins {
                for &b in &outs {
                    mask[a] = false;
                    mask[b] = true;
                    let s = score_subset(app_counts, &mask);
                    mask[a] = true;
                    mask[b] = false;
                    if lex_less(s, best.map_or(score, |x| x.0)) {
                        best = Some((s, a, b));
                    }
                }
            }
            match best {
                Some((s, a, b)) => {
                    mask[a] = false;
                    mask[b] = true;
                    score = s;
                }
                None => return mask,
            }
        }
    }
}

/// Disjoint app sets; the test-app subset is the one whose easy/medium/hard
/// template proportions best match the training apps'.
pub fn split_unseen_app(catalog: &TaskCatalog, cfg: &SplitConfig) -> Result<SplitSpec, BenchError> {
    check_seeds(cfg)?;
    let (usable, excluded_templates) = usable_templates(catalog);
    let grouped = group_by_app(&usable);
    if grouped.len() < 2 {
        return Err(BenchError::Catalog(format!(
            "unseen-app split needs at least 2 apps with usable templates, found {}",
            grouped.len()
        )));
    }
    let excluded_apps: Vec<String> = catalog
        .apps
        .iter()
        .filter(|a| !grouped.iter().any(|(g, _)| g == &a.app_id))
        .map(|a| a.app_id.clone())
        .collect();
    let n = grouped.len();
    let (tr, te) = (f64::from(cfg.ratio.0), f64::from(cfg.ratio.1));
    let n_test = ((n as f64 * te / (tr + te)).ceil() as usize).clamp(1, n - 1);
    let app_counts: Vec<Counts> = grouped
        .iter()
        .map(|(_, ts)| counts_of(ts.iter().map(|t| &t.difficulty)))
        .collect();
    let mask = search_app_partition(&app_counts, n_test, cfg);
    let mut train_t = Vec::new();
    let mut test_t = Vec::new();
    for ((app, ts), is_test) in grouped.into_iter().zip(mask) {
        let side = if is_test { &mut test_t } else { &mut train_t };
        side.extend(ts.into_iter().map(|t| (app.clone(), t)));
    }
    let a = assemble(&train_t, &test_t, cfg)?;
    Ok(finish(Regime::UnseenApp, a, cfg, excluded_templates, excluded_apps, Vec::new()))
}

pub fn split(catalog: &TaskCatalog, regime: Regime, cfg: &SplitConfig) -> Result<SplitSpec, BenchError> {
    match regime {
        Regime::UnseenInstance => split_unseen_instance(catalog, cfg),
        Regime::UnseenTemplate => split_unseen_template(catalog, cfg),
        Regime::UnseenApp => split_unseen_app(catalog, cfg),
    }
}

/// Per-template quotas that spread `k` instances as evenly as possible.
pub fn balanced_quotas(n_templates: usize, k: usize) -> Vec<usize> {
    if n_templates == 0 {
        return Vec::new();
    }
    let base = k / n_templates;
    let extra = k % n_templates;
    (0..n_templates).map(|i| base + usize::from(i < extra)).collect()
}

/// Few-shot adaptation instances for each unseen app: exactly `k_per_app`
/// distinct instances per app, balanced over that app's test templates and
/// never colliding with a test instruction.
pub fn make_adaptation_set(
    catalog: &TaskCatalog,
    split: &SplitSpec,
    k_per_app: usize,
    seeds: &[u64],
) -> Result<Vec<Context>, BenchError> {
    if split.regime != Regime::UnseenApp {
        return Err(BenchError::WrongRegime { expected: Regime::UnseenApp, found: split.regime });
    }
    let used: HashSet<u64> = split.eval_seeds.iter().chain(split.train_seeds.iter()).copied().collect();
    let mut clash: Vec<u64> = seeds.iter().copied().filter(|s| used.contains(s)).collect();
    if !clash.is_empty() {
        clash.sort_unstable();
        clash.dedup();
        return Err(BenchError::SeedOverlap(clash));
    }
    let blocked: HashSet<&str> = split.test.iter().map(|c| c.instruction.as_str()).collect();
    let mut apps: Vec<&str> = Vec::new();
    let mut templates_by_app: HashMap<&str, Vec<&str>> = HashMap::new();
    for c in &split.test {
        let ts = templates_by_app.entry(c.app_id.as_str()).or_insert_with(|| {
            apps.push(c.app_id.as_str());
            Vec::new()
        });
        if !ts.contains(&c.template_id.as_str()) {
            ts.push(c.template_id.as_str());
        }
    }
    let mut out = Vec::new();
    for app in apps {
        let tids = &templates_by_app[app];
        let quotas = balanced_quotas(tids.len(), k_per_app);
        let mut chosen: Vec<Context> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        let mut leftovers: Vec<Context> = Vec::new();
        for (tid, &quota) in tids.iter().zip(&quotas) {
            let (_, template) = catalog
                .find_template(tid)
                .ok_or_else(|| BenchError::Catalog(format!("template {tid} not in catalog")))?;
            let mut taken = 0;
            for &seed in seeds {
                let ctx = Context::new(app, template, seed)?;
                if blocked.contains(ctx.instruction.as_str()) || seen.contains(&ctx.instruction) {
                    continue;
                }
                seen.insert(ctx.instruction.clone());
                if taken < quota {
                    chosen.push(ctx);
                    taken += 1;
                } else {
                    leftovers.push(ctx);
                }
            }
        }
        // templates short of distinct instances are backfilled from the others
        let mut leftovers = leftovers.into_iter();
        while chosen.len() < k_per_app {
            match leftovers.next() {
                Some(c) => chosen.push(c),
                None => break,
            }
        }
        if chosen.len() < k_per_app {
            return Err(BenchError::AdaptationSet {
                app: app.to_string(),
                found: chosen.len(),
                needed: k_per_app,
            });
        }
        out.extend(chosen);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    InstructionOverlap { train_index: usize, test_index: usize, instruction: String },
    TemplateOverlap { template_id: String },
    AppOverlap { app_id: String },
    AppSetMismatch { train_only: Vec<String>, test_only: Vec<String> },
    SeedListOverlap { seed: u64 },
    UndeclaredSeed { side: Side, index: usize, seed: u64 },
    DifficultyImbalance { gap: f64, tolerance: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Machine-checkable conformance report; never fails, the report carries
/// every violation found.
pub fn verify_split(split: &SplitSpec) -> VerifyReport {
    let mut v = Vec::new();

    let mut test_index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, c) in split.test.iter().enumerate() {
        test_index.entry(c.instruction.as_str()).or_default().push(i);
    }
    for (i, c) in split.train.iter().enumerate() {
        if let Some(js) = test_index.get(c.instruction.as_str()) {
            for &j in js {
                v.push(Violation::InstructionOverlap {
                    train_index: i,
                    test_index: j,
                    instruction: c.instruction.clone(),
                });
            }
        }
    }

    let eval: BTreeSet<u64> = split.eval_seeds.iter().copied().collect();
    let train_seeds: BTreeSet<u64> = split.train_seeds.iter().copied().collect();
    for s in eval.intersection(&train_seeds) {
        v.push(Violation::SeedListOverlap { seed: *s });
    }
    for (i, c) in split.train.iter().enumerate() {
        if !train_seeds.contains(&c.instance_seed) {
            v.push(Violation::UndeclaredSeed { side: Side::Train, index: i, seed: c.instance_seed });
        }
    }
    for (i, c) in split.test.iter().enumerate() {
        if !eval.contains(&c.instance_seed) {
            v.push(Violation::UndeclaredSeed { side: Side::Test, index: i, seed: c.instance_seed });
        }
    }

    let train_templates: BTreeSet<&str> = split.train.iter().map(|c| c.template_id.as_str()).collect();
    let test_templates: BTreeSet<&str> = split.test.iter().map(|c| c.template_id.as_str()).collect();
    let train_apps = split.train_apps();
    let test_apps = split.test_apps();
    match split.regime {
        Regime::UnseenInstance => {}
        Regime::UnseenTemplate => {
            for t in train_templates.intersection(&test_templates) {
                v.push(Violation::TemplateOverlap { template_id: t.to_string() });
            }
            if train_apps != test_apps {
                v.push(Violation::AppSetMismatch {
                    train_only: train_apps.difference(&test_apps).map(|s| s.to_string()).collect(),
                    test_only: test_apps.difference(&train_apps).map(|s| s.to_string()).collect(),
                });
            }
        }
        Regime::UnseenApp => {
            for a in train_apps.intersection(&test_apps) {
                v.push(Violation::AppOverlap { app_id: a.to_string() });
            }
        }
    }

    let (tr, te) = (side_stats(&split.train), side_stats(&split.test));
    let gap = if tr.templates == 0 || te.templates == 0 {
        0.0
    } else {
        (tr.mean_difficulty - te.mean_difficulty).abs()
    };
    if gap > split.report.tolerance + 1e-12 {
        v.push(Violation::DifficultyImbalance { gap, tolerance: split.report.tolerance });
    }
    VerifyReport { violations: v }
}

/// Statistics table in the benchmark's usual layout.
pub fn format_table(splits: &[&SplitSpec]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} | {:>8} {:>8} {:>8} | {:>17} | {:>5} | {:>17} | {:>5}",
        "Regime", "Inst.", "Templ.", "App", "Train I / T / A", "Diff", "Test I / T / A", "Diff"
    );
    let _ = writeln!(s, "{}", "-".repeat(104));
    for sp in splits {
        let r = &sp.report;
        let _ = writeln!(
            s,
            "{:<16} | {:>8} {:>8} {:>8} | {:>17} | {:>5.2} | {:>17} | {:>5.2}",
            sp.regime.label(),
            mark(r.instance_overlap),
            mark(r.template_overlap),
            mark(r.app_overlap),
            format!("{} / {} / {}", r.train.instances, r.train.templates, r.train.apps),
            r.train.mean_difficulty,
            format!("{} / {} / {}", r.test.instances, r.test.templates, r.test.apps),
            r.test.mean_difficulty,
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::AppEntry;
    use crate::cmdp::TaskType;

    fn template(id: &str, difficulty: Difficulty, pool: &[&str]) -> TaskTemplate {
        let (body, slots) = if pool.len() > 1 {
            (
                format!("{id} with {{x}} and {{y}}"),
                [
                    ("x".to_string(), pool.iter().map(|s| s.to_string()).collect()),
                    ("y".to_string(), vec!["a".into(), "b".into(), "c".into(), "d".into()]),
                ]
                .into_iter()
                .collect(),
            )
        } else if pool.len() == 1 {
            (format!("{id} with {{x}}"), [("x".to_string(), vec![pool[0].to_string()])].into_iter().collect())
        } else {
            (format!("{id} fixed"), BTreeMap::new())
        };
        TaskTemplate {
            template_id: id.into(),
            body,
            slots,
            difficulty,
            task_type: TaskType::TaskCompletion,
            parameterizable: pool.len() > 1,
        }
    }

    fn pool8() -> Vec<&'static str> {
        vec!["p0", "p1", "p2", "p3", "p4", "p5", "p6", "p7"]
    }

    #[test]
    fn seed_overlap_rejected() {
        let cat = TaskCatalog {
            apps: vec![AppEntry { app_id: "a".into(), templates: vec![template("t", Difficulty::Easy, &pool8())] }],
        };
        let cfg = SplitConfig { eval_seeds: vec![1, 2], train_seeds: vec![2, 3], ..Default::default() };
        assert_eq!(split_unseen_instance(&cat, &cfg), Err(BenchError::SeedOverlap(vec![2])));
    }

    #[test]
    fn empty_usable_set_is_catalog_error() {
        let cat = TaskCatalog {
            apps: vec![AppEntry { app_id: "a".into(), templates: vec![template("t", Difficulty::Easy, &[])] }],
        };
        assert!(matches!(split_unseen_instance(&cat, &SplitConfig::default()), Err(BenchError::Catalog(_))));
    }

    #[test]
    fn single_value_pool_collapses_train() {
        // one value in the varying slot and one in the second: every seed renders the same text
        let t = TaskTemplate {
            template_id: "t".into(),
            body: "do {x} now {y}".into(),
            slots: [("x".to_string(), vec!["only".to_string()]), ("y".to_string(), vec!["a".into(), "a".into()])]
                .into_iter()
                .collect(),
            difficulty: Difficulty::Easy,
            task_type: TaskType::TaskCompletion,
            parameterizable: true,
        };
        let cat = TaskCatalog { apps: vec![AppEntry { app_id: "a".into(), templates: vec![t] }] };
        let sp = split_unseen_instance(&cat, &SplitConfig::default()).unwrap();
        assert!(sp.train.len() <= 1);
        assert_eq!(sp.report.pre_dedup_train, 16);
        assert!(verify_split(&sp).is_clean());
    }

    #[test]
    fn template_split_one_app_four_equal() {
        let ts: Vec<TaskTemplate> = (0..4).map(|i| template(&format!("t{i}"), Difficulty::Medium, &pool8())).collect();
        let cat = TaskCatalog { apps: vec![AppEntry { app_id: "a".into(), templates: ts }] };
        let sp = split_unseen_template(&cat, &SplitConfig::default()).unwrap();
        assert_eq!(sp.report.train.templates, 3);
        assert_eq!(sp.report.test.templates, 1);
        assert!(verify_split(&sp).is_clean());
    }

    #[test]
    fn template_split_guard_keeps_lower_difficulty_in_train() {
        // easy + hard: testing the hard one requires the easy one in train
        let cat = TaskCatalog {
            apps: vec![AppEntry {
                app_id: "a".into(),
                templates: vec![template("e", Difficulty::Easy, &pool8()), template("h", Difficulty::Hard, &pool8())],
            }],
        };
        let sp = split_unseen_template(&cat, &SplitConfig::default()).unwrap();
        assert_eq!(sp.report.test.templates, 1);
        // both assignments satisfy the guard; the test side must never strand a hard template without easy support
        let test_t: BTreeSet<_> = sp.test.iter().map(|c| c.template_id.as_str()).collect();
        if test_t.contains("h") {
            assert!(sp.train.iter().any(|c| c.template_id == "e"));
        }
    }

    #[test]
    fn guard_examples() {
        assert!(guard_satisfied(&[1, 0, 0], &[0, 0, 1]));
        assert!(!guard_satisfied(&[0, 1, 0], &[0, 0, 2]));
        assert!(guard_satisfied(&[0, 0, 1], &[0, 0, 1]));
        assert!(guard_satisfied(&[0, 1, 1], &[1, 0, 0]));
        assert!(!guard_satisfied(&[0, 0, 1], &[0, 0, 0]));
    }

    /// 8 apps x 5 templates. The oracle brute-forces every per-app choice of
    /// the single test template and finds the best achievable gap.
    #[test]
    fn template_split_matches_exhaustive_oracle() {
        let levels = [
            [1, 1, 2, 2, 3],
            [1, 2, 2, 3, 3],
            [1, 1, 1, 2, 3],
            [2, 2, 2, 3, 3],
            [1, 1, 2, 3, 3],
            [1, 2, 3, 3, 3],
            [1, 1, 1, 1, 2],
            [2, 2, 3, 3, 3],
        ];
        let apps: Vec<AppEntry> = levels
            .iter()
            .enumerate()
            .map(|(a, ls)| AppEntry {
                app_id: format!("app{a}"),
                templates: ls
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| template(&format!("a{a}t{i}"), Difficulty::try_from(l as u8).unwrap(), &pool8()))
                    .collect(),
            })
            .collect();
        let cat = TaskCatalog { apps };
        let sp = split_unseen_template(&cat, &SplitConfig::default()).unwrap();

        // oracle: each app sends exactly one template (round(5/4) = 1) to test
        let total: u32 = levels.iter().flatten().sum();
        let mut best = f64::INFINITY;
        let mut choice = [0usize; 8];
        loop {
            let ok = (0..8).all(|a| {
                let t = levels[a][choice[a]];
                let rest_min = (0..5).filter(|&i| i != choice[a]).map(|i| levels[a][i]).min().unwrap();
                t == 1 || rest_min <= t
            });
            if ok {
                let test_sum: u32 = (0..8).map(|a| levels[a][choice[a]]).sum();
                let gap = ((total - test_sum) as f64 / 32.0 - test_sum as f64 / 8.0).abs();
                best = best.min(gap);
            }
            let mut i = 0;
            while i < 8 {
                choice[i] += 1;
                if choice[i] < 5 {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
            if i == 8 {
                break;
            }
        }
        assert!((sp.report.difficulty_gap - best).abs() < 1e-12, "{} vs {}", sp.report.difficulty_gap, best);
        assert!(sp.report.difficulty_gap <= 0.05);
        assert_eq!(sp.report.test.templates, 8);
        assert!(verify_split(&sp).is_clean());
    }

    #[test]
    fn app_split_two_identical_apps() {
        let mk = |a: &str| AppEntry {
            app_id: a.into(),
            templates: vec![
                template(&format!("{a}1"), Difficulty::Easy, &pool8()),
                template(&format!("{a}2"), Difficulty::Hard, &pool8()),
            ],
        };
        let cat = TaskCatalog { apps: vec![mk("x"), mk("y")] };
        let cfg = SplitConfig { tolerance: 0.0, ..Default::default() };
        let sp = split_unseen_app(&cat, &cfg).unwrap();
        assert_eq!(sp.report.train.apps, 1);
        assert_eq!(sp.report.test.apps, 1);
        assert!(sp.report.balanced);
        assert!(verify_split(&sp).is_clean());
    }

    #[test]
    fn app_split_needs_two_apps() {
        let cat = TaskCatalog {
            apps: vec![AppEntry { app_id: "x".into(), templates: vec![template("t", Difficulty::Easy, &pool8())] }],
        };
        assert!(matches!(split_unseen_app(&cat, &SplitConfig::default()), Err(BenchError::Catalog(_))));
    }

    /// Brute force over all 2^17 subsets agrees with the subset search.
    #[test]
    fn app_search_matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<Counts> = (0..17)
            .map(|_| [rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..4)])
            .map(|c: Counts| if total_of(&c) == 0 { [1, 0, 0] } else { c })
            .collect();
        let cfg = SplitConfig::default();
        let k = 5;
        let found = search_app_partition(&counts, k, &cfg);
        let found_score = score_subset(&counts, &found);

        let mut best = (f64::INFINITY, f64::INFINITY);
        for bits in 0u32..(1 << 17) {
            if bits.count_ones() as usize != k {
                continue;
            }
            let (mut tr, mut te) = ([0u32; 3], [0u32; 3]);
            for (i, c) in counts.iter().enumerate() {
                let side = if bits & (1 << i) != 0 { &mut te } else { &mut tr };
                for j in 0..3 {
                    side[j] += c[j];
                }
            }
            let prop = |c: &Counts, j: usize| f64::from(c[j]) / f64::from(c.iter().sum::<u32>().max(1));
            let dist: f64 = (0..3).map(|j| (prop(&tr, j) - prop(&te, j)).abs()).sum();
            let gap = (mean_of(&tr) - mean_of(&te)).abs();
            if dist < best.0 - 1e-12 || ((dist - best.0).abs() <= 1e-12 && gap < best.1 - 1e-12) {
                best = (dist, gap);
            }
        }
        assert!((found_score.0 - best.0).abs() < 1e-12 && (found_score.1 - best.1).abs() < 1e-12);
        assert_eq!(found.iter().filter(|&&b| b).count(), k);
    }

    #[test]
    fn greedy_search_returns_target_size() {
        let counts: Vec<Counts> = (0..24).map(|i| [i % 3, (i / 3) % 2, i % 2]).collect();
        let cfg = SplitConfig { exhaustive_app_limit: 20, ..Default::default() };
        let mask = search_app_partition(&counts, 6, &cfg);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 6);
    }

    #[test]
    fn quotas_follow_template_counts() {
        let per: Vec<usize> = [1, 1, 2, 4, 8].iter().map(|&n| balanced_quotas(n, 8)[0]).collect();
        assert_eq!(per, vec![8, 8, 4, 2, 1]);
        assert_eq!(balanced_quotas(3, 8), vec![3, 3, 2]);
    }

    #[test]
    fn adaptation_set_pigeonhole_error() {
        let small = TaskTemplate {
            template_id: "s".into(),
            body: "open {x}".into(),
            slots: [("x".to_string(), vec!["a".into(), "b".into(), "c".into()])].into_iter().collect(),
            difficulty: Difficulty::Easy,
            task_type: TaskType::TaskCompletion,
            parameterizable: true,
        };
        let cat = TaskCatalog {
            apps: vec![
                AppEntry { app_id: "big".into(), templates: vec![template("b1", Difficulty::Easy, &pool8())] },
                AppEntry { app_id: "small".into(), templates: vec![small] },
            ],
        };
        let mut sp = split_unseen_app(&cat, &SplitConfig::default()).unwrap();
        let cfg_eval = || DEFAULT_EVAL_SEEDS.to_vec();
        // put the small app on the test side regardless of what the search picked
        let small_t = &cat.apps[1].templates[0];
        sp.test = cfg_eval().iter().map(|&s| Context::new("small", small_t, s).unwrap()).collect();
        let big_t = &cat.apps[0].templates[0];
        sp.train = DEFAULT_TRAIN_SEEDS.iter().map(|&s| Context::new("big", big_t, s).unwrap()).collect();
        let seeds: Vec<u64> = (1000..1100).collect();
        match make_adaptation_set(&cat, &sp, 8, &seeds) {
            Err(BenchError::AdaptationSet { app, .. }) => assert_eq!(app, "small"),
            other => panic!("expected AdaptationSet error, got {other:?}"),
        }
    }

    #[test]
    fn adaptation_set_wrong_regime() {
        let cat = TaskCatalog {
            apps: vec![AppEntry { app_id: "a".into(), templates: vec![template("t", Difficulty::Easy, &pool8())] }],
        };
        let sp = split_unseen_instance(&cat, &SplitConfig::default()).unwrap();
        assert!(matches!(make_adaptation_set(&cat, &sp, 8, &[999]), Err(BenchError::WrongRegime { .. })));
    }

    #[test]
    fn verify_reports_exact_duplicate_pair() {
        let cat = TaskCatalog {
            apps: vec![AppEntry {
                app_id: "a".into(),
                templates: (0..3).map(|i| template(&format!("t{i}"), Difficulty::Easy, &pool8())).collect(),
            }],
        };
        let mut sp = split_unseen_instance(&cat, &SplitConfig::default()).unwrap();
        assert!(verify_split(&sp).is_clean());
        let mut leaked = sp.test[4].clone();
        leaked.instance_seed = sp.train_seeds[0];
        sp.train.push(leaked.clone());
        let rep = verify_split(&sp);
        assert_eq!(
            rep.violations,
            vec![Violation::InstructionOverlap {
                train_index: sp.train.len() - 1,
                test_index: 4,
                instruction: leaked.instruction
            }]
        );
    }

    /// Randomly tampered splits: verify_split agrees with a naive set-based
    /// re-implementation on whether each property holds.
    #[test]
    fn verify_agrees_with_set_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n_apps = rng.gen_range(2..5);
            let apps: Vec<AppEntry> = (0..n_apps)
                .map(|a| AppEntry {
                    app_id: format!("app{a}"),
                    templates: (0..rng.gen_range(2..5))
                        .map(|i| {
                            template(
                                &format!("c{trial}a{a}t{i}"),
                                Difficulty::try_from(rng.gen_range(1..=3u8)).unwrap(),
                                &pool8(),
                            )
                        })
                        .collect(),
                })
                .collect();
            let cat = TaskCatalog { apps };
            let regime = Regime::ALL[trial % 3];
            let cfg = SplitConfig { tolerance: 10.0, ..Default::default() };
            let mut sp = split(&cat, regime, &cfg).unwrap();
            // tamper
            match rng.gen_range(0..4) {
                0 => {}
                1 if !sp.test.is_empty() => {
                    let c = sp.test[rng.gen_range(0..sp.test.len())].clone();
                    sp.train.push(c);
                }
                2 if !sp.train.is_empty() => {
                    let i = rng.gen_range(0..sp.train.len());
                    sp.train[i].instance_seed = 424242;
                }
                _ => {
                    sp.train_seeds.push(sp.eval_seeds[0]);
                }
            }
            let rep = verify_split(&sp);

            let train_instr: HashSet<&String> = sp.train.iter().map(|c| &c.instruction).collect();
            let test_instr: HashSet<&String> = sp.test.iter().map(|c| &c.instruction).collect();
            let overlap = train_instr.intersection(&test_instr).count() > 0;
            let ev: HashSet<u64> = sp.eval_seeds.iter().copied().collect();
            let trs: HashSet<u64> = sp.train_seeds.iter().copied().collect();
            let seed_overlap = ev.intersection(&trs).count() > 0;
            let undeclared = sp.train.iter().any(|c| !trs.contains(&c.instance_seed))
                || sp.test.iter().any(|c| !ev.contains(&c.instance_seed));
            let tt: HashSet<&String> = sp.train.iter().map(|c| &c.template_id).collect();
            let te: HashSet<&String> = sp.test.iter().map(|c| &c.template_id).collect();
            let ta: HashSet<&String> = sp.train.iter().map(|c| &c.app_id).collect();
            let tea: HashSet<&String> = sp.test.iter().map(|c| &c.app_id).collect();
            let regime_bad = match regime {
                Regime::UnseenInstance => false,
                Regime::UnseenTemplate => tt.intersection(&te).count() > 0 || ta != tea,
                Regime::UnseenApp => ta.intersection(&tea).count() > 0,
            };

            let has = |f: &dyn Fn(&Violation) -> bool| rep.violations.iter().any(f);
            assert_eq!(overlap, has(&|v| matches!(v, Violation::InstructionOverlap { .. })), "trial {trial}");
            assert_eq!(seed_overlap, has(&|v| matches!(v, Violation::SeedListOverlap { .. })), "trial {trial}");
            assert_eq!(undeclared, has(&|v| matches!(v, Violation::UndeclaredSeed { .. })), "trial {trial}");
            assert_eq!(
                regime_bad,
                has(&|v| matches!(
                    v,
                    Violation::TemplateOverlap { .. } | Violation::AppOverlap { .. } | Violation::AppSetMismatch { .. }
                )),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn test_share_rounding() {
        assert_eq!(test_share(2, (3, 1)), 1);
        assert_eq!(test_share(4, (3, 1)), 1);
        assert_eq!(test_share(5, (3, 1)), 1);
        assert_eq!(test_share(8, (3, 1)), 2);
        assert_eq!(test_share(17, (3, 1)), 4);
        assert_eq!(test_share(1, (3, 1)), 0);
    }
}
