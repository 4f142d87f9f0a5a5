//! Procedurally generated mini-app suite: apps, skill-composed task
//! templates and their catalog.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{AppEntry, TaskCatalog, TaskTemplate};
use crate::cmdp::{Difficulty, TaskType};
use crate::hashing;

pub const ITEMS_PER_APP: usize = 10;
/// Items present in the store at reset; the rest can be created.
pub const INITIAL_ITEMS: usize = 6;
pub const VALUES_PER_APP: usize = 6;
pub const SETTINGS_PER_APP: usize = 5;
pub const LAYOUT_FAMILIES: u8 = 3;

/// Button roles with the wordings an app may use for them.
pub const WORDING: &[(&str, [&str; 6])] = &[
    ("search", ["Search", "Find", "Lookup", "Browse", "Query", "Explore"]),
    ("add", ["Add", "New", "Create", "Compose", "Plus", "Insert"]),
    ("settings", ["Settings", "Options", "Preferences", "Config", "Setup", "Controls"]),
    ("form", ["Form", "Entry", "Record", "Sheet", "Survey", "Intake"]),
    ("delete", ["Delete", "Remove", "Trash", "Discard", "Erase", "Drop"]),
    ("save", ["Save", "Done", "Keep", "Store", "Confirm", "OK"]),
    ("submit", ["Submit", "Send", "Apply", "Post", "File", "Finish"]),
];

const APP_NAMES: &[&str] = &[
    "Notes", "Calendar", "Tasks", "Recipes", "Contacts", "Expenses", "Music", "Gallery", "Files", "Tracker",
    "Messages", "Maps", "Recorder", "Clock", "Journal", "Library", "Weather", "Fitness", "Podcasts", "Camera",
    "Wallet", "Browser", "Mail", "Photos",
];

const ITEM_WORDS: &[&str] = &[
    "groceries", "budget", "travel plan", "workout", "reading list", "birthday", "invoice", "garden", "podcast",
    "vacation", "weekly review", "car service", "dentist", "book club", "yoga", "piano", "taxes", "renovation",
    "camping", "wedding", "conference", "hiking", "movie night", "laundry", "painting", "bakery", "marathon",
    "chess", "pottery", "museum", "picnic", "recital", "harvest", "festival", "seminar", "voyage", "auction",
    "concert", "workshop", "reunion",
];

const VALUE_WORDS: &[&str] = &[
    "red", "blue", "green", "amber", "violet", "teal", "ivory", "coral", "slate", "olive", "navy", "pink",
];

const SETTING_WORDS: &[&str] = &[
    "dark mode", "auto sync", "notifications", "location", "backup", "sound", "vibration", "auto update",
    "compact view", "large text", "offline mode", "analytics",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    SearchItem,
    CreateItem,
    DeleteItem,
    ToggleSetting,
    FillForm,
    ReadFieldAndAnswer,
}

impl SkillKind {
    pub const ALL: [SkillKind; 6] = [
        SkillKind::SearchItem,
        SkillKind::CreateItem,
        SkillKind::DeleteItem,
        SkillKind::ToggleSetting,
        SkillKind::FillForm,
        SkillKind::ReadFieldAndAnswer,
    ];
}

/// One skill inside a template, with the slot names it reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "skill", rename_all = "snake_case")]
pub enum Skill {
    SearchItem { item: String },
    CreateItem { item: String },
    DeleteItem { item: String },
    ToggleSetting { setting: String },
    FillForm { item: String, value: String },
    ReadFieldAndAnswer { item: String },
}

impl Skill {
    pub fn kind(&self) -> SkillKind {
        match self {
            Skill::SearchItem { .. } => SkillKind::SearchItem,
            Skill::CreateItem { .. } => SkillKind::CreateItem,
            Skill::DeleteItem { .. } => SkillKind::DeleteItem,
            Skill::ToggleSetting { .. } => SkillKind::ToggleSetting,
            Skill::FillForm { .. } => SkillKind::FillForm,
            Skill::ReadFieldAndAnswer { .. } => SkillKind::ReadFieldAndAnswer,
        }
    }
}

/// Which main-screen button a role refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainButton {
    Search,
    Add,
    Settings,
    Form,
}

impl MainButton {
    pub const ALL: [MainButton; 4] = [MainButton::Search, MainButton::Add, MainButton::Settings, MainButton::Form];

    pub fn label(self) -> &'static str {
        match self {
            MainButton::Search => "Search",
            MainButton::Add => "Add",
            MainButton::Settings => "Settings",
            MainButton::Form => "Form",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniApp {
    pub app_id: String,
    pub layout_family: u8,
    /// `main_order[slot]` is the button drawn in that slot.
    pub main_order: [MainButton; 4],
    pub items: Vec<String>,
    /// Tag of every item (shown on its detail screen).
    pub tags: BTreeMap<String, String>,
    pub values: Vec<String>,
    pub settings: Vec<String>,
    /// Other apps shown on the launcher.
    pub neighbours: Vec<String>,
    /// Button text per role (see `WORDING`).
    pub wording: BTreeMap<String, String>,
}

impl MiniApp {
    pub fn text<'a>(&'a self, role: &'a str) -> &'a str {
        self.wording.get(role).map(String::as_str).unwrap_or(role)
    }

    /// Typed-content vocabulary: all item names then all values.
    pub fn candidates(&self) -> Vec<String> {
        self.items.iter().chain(self.values.iter()).cloned().collect()
    }

    pub fn initial_items(&self) -> &[String] {
        &self.items[..INITIAL_ITEMS]
    }

    pub fn creatable_items(&self) -> &[String] {
        &self.items[INITIAL_ITEMS..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub template_id: String,
    pub app_id: String,
    pub skills: Vec<Skill>,
}

/// Everything needed to run and score any context of the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub catalog: TaskCatalog,
    pub apps: BTreeMap<String, MiniApp>,
    pub tasks: BTreeMap<String, TaskSpec>,
}

impl Suite {
    pub fn app(&self, app_id: &str) -> Option<&MiniApp> {
        self.apps.get(app_id)
    }

    pub fn task(&self, template_id: &str) -> Option<&TaskSpec> {
        self.tasks.get(template_id)
    }

    /// App ids in catalog order; the policy's app-token vocabulary.
    pub fn app_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.catalog.apps.iter().map(|a| a.app_id.clone()).collect();
        for app in self.apps.values() {
            for n in &app.neighbours {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        names
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_apps: usize,
    pub templates_per_app: usize,
    pub skills: Vec<SkillKind>,
    /// Every `nonparam_every`-th template gets single-value pools; 0 disables.
    pub nonparam_every: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_apps: 17,
            templates_per_app: 7,
            skills: SkillKind::ALL.to_vec(),
            nonparam_every: 3,
            seed: 0,
        }
    }
}

fn phrase(skill: &Skill, variant: usize) -> String {
    let v = variant.is_multiple_of(2);
    match skill {
        Skill::SearchItem { item } => {
            if v { format!("open the entry '{{{item}}}'") } else { format!("look up '{{{item}}}'") }
        }
        Skill::CreateItem { item } => {
            if v { format!("create a new entry '{{{item}}}'") } else { format!("add '{{{item}}}' as a new entry") }
        }
        Skill::DeleteItem { item } => {
            if v { format!("delete the entry '{{{item}}}'") } else { format!("remove '{{{item}}}'") }
        }
        Skill::ToggleSetting { setting } => {
            if v { format!("turn on '{{{setting}}}'") } else { format!("enable the '{{{setting}}}' setting") }
        }
        Skill::FillForm { item, value } => {
            if v {
                format!("submit the form with name '{{{item}}}' and tag '{{{value}}}'")
            } else {
                format!("fill in the form for '{{{item}}}' tagged '{{{value}}}'")
            }
        }
        Skill::ReadFieldAndAnswer { item } => {
            if v { format!("tell me the tag of '{{{item}}}'") } else { format!("report which tag '{{{item}}}' has") }
        }
    }
}

fn difficulty_plan(n: usize) -> Vec<usize> {
    // roughly 3:3:1 easy/medium/hard
    let base = [1, 1, 1, 2, 2, 2, 3];
    (0..n).map(|i| base[i % base.len()]).collect()
}

fn app_wording(seed: u64, app: usize) -> BTreeMap<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(&[seed, app as u64, 0x70de]));
    WORDING.iter().map(|(role, words)| (role.to_string(), words[rng.gen_range(0..words.len())].to_string())).collect()
}

/// Builds a suite of `n_apps` apps with `templates_per_app` templates each.
/// Templates compose 1 to 3 skills; difficulty is the skill count.
pub fn build_default_suite(cfg: &SuiteConfig) -> Suite {
    assert!(!cfg.skills.is_empty(), "skill library must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(&[cfg.seed, 0x5017e]));
    let n_names = APP_NAMES.len().max(cfg.n_apps);
    let names: Vec<String> = (0..n_names)
        .map(|i| if i < APP_NAMES.len() { APP_NAMES[i].to_string() } else { format!("App{i}") })
        .collect();

    let mut apps = BTreeMap::new();
    let mut tasks = BTreeMap::new();
    let mut catalog = TaskCatalog::default();
    let single_skill = cfg.skills.len() == 1;

    for a in 0..cfg.n_apps {
        let app_id = names[a].clone();
        let mut items: Vec<String> = ITEM_WORDS.iter().map(|s| s.to_string()).collect();
        items.shuffle(&mut rng);
        items.truncate(ITEMS_PER_APP);
        let mut values: Vec<String> = VALUE_WORDS.iter().map(|s| s.to_string()).collect();
        values.shuffle(&mut rng);
        values.truncate(VALUES_PER_APP);
        let mut settings: Vec<String> = SETTING_WORDS.iter().map(|s| s.to_string()).collect();
        settings.shuffle(&mut rng);
        settings.truncate(SETTINGS_PER_APP);
        let tags = items
            .iter()
            .map(|it| (it.clone(), values[rng.gen_range(0..values.len())].clone()))
            .collect();
        let layout_family = (a % usize::from(LAYOUT_FAMILIES)) as u8;
        // two button orders per family
        let mut main_order = MainButton::ALL;
        if (a / usize::from(LAYOUT_FAMILIES)) % 2 == 1 {
            main_order.swap(0, 3);
            main_order.swap(1, 2);
        }
        let mut others: Vec<String> = names.iter().filter(|n| **n != app_id).cloned().collect();
        others.shuffle(&mut rng);
        others.truncate(7);
        let app = MiniApp {
            app_id: app_id.clone(),
            layout_family,
            main_order,
            items,
            tags,
            values,
            settings,
            neighbours: others,
            wording: app_wording(cfg.seed, a),
        };

        let mut templates = Vec::new();
        let plan = difficulty_plan(cfg.templates_per_app);
        for (t, &n_skills) in plan.iter().enumerate() {
            let n_skills = if single_skill { 1 } else { n_skills };
            // rotate the library so every skill shows up in many apps
            let mut kinds: Vec<SkillKind> = Vec::new();
            let offset = a * 5 + t * 2;
            let mut k = 0;
            while kinds.len() < n_skills && k < cfg.skills.len() * 2 {
                let cand = cfg.skills[(offset + k) % cfg.skills.len()];
                k += 1;
                if cand == SkillKind::ReadFieldAndAnswer && kinds.len() + 1 < n_skills {
                    continue;
                }
                if !single_skill && kinds.contains(&cand) {
                    continue;
                }
                kinds.push(cand);
            }
            if let Some(pos) = kinds.iter().position(|k| *k == SkillKind::ReadFieldAndAnswer) {
                let ans = kinds.remove(pos);
                kinds.push(ans);
            }
            let parameterizable = !(cfg.nonparam_every > 0 && (a + t) % cfg.nonparam_every == 0 && !single_skill);

            let mut slots: BTreeMap<String, Vec<String>> = BTreeMap::new();
            let mut skills = Vec::new();
            let mut fixed_item = 0usize;
            let mut fixed_value = 0usize;
            let mut fixed_setting = 0usize;
            for (s, kind) in kinds.iter().enumerate() {
                let item_slot = format!("item{}", s + 1);
                let pool_items = |creatable: bool| -> Vec<String> {
                    if creatable { app.creatable_items().to_vec() } else { app.initial_items().to_vec() }
                };
                let mut add_slot = |name: &str, pool: Vec<String>, fixed: &mut usize| {
                    let pool = if parameterizable {
                        pool
                    } else {
                        let v = pool[*fixed % pool.len()].clone();
                        *fixed += 1;
                        vec![v]
                    };
                    slots.insert(name.to_string(), pool);
                };
                let skill = match kind {
                    SkillKind::SearchItem => {
                        add_slot(&item_slot, pool_items(false), &mut fixed_item);
                        Skill::SearchItem { item: item_slot }
                    }
                    SkillKind::CreateItem => {
                        let mut f = 0;
                        add_slot(&item_slot, pool_items(true), &mut f);
                        Skill::CreateItem { item: item_slot }
                    }
                    SkillKind::DeleteItem => {
                        add_slot(&item_slot, pool_items(false), &mut fixed_item);
                        Skill::DeleteItem { item: item_slot }
                    }
                    SkillKind::ToggleSetting => {
                        let name = format!("setting{}", s + 1);
                        add_slot(&name, app.settings.clone(), &mut fixed_setting);
                        Skill::ToggleSetting { setting: name }
                    }
                    SkillKind::FillForm => {
                        add_slot(&item_slot, pool_items(false), &mut fixed_item);
                        let value = format!("value{}", s + 1);
                        add_slot(&value, app.values.clone(), &mut fixed_value);
                        Skill::FillForm { item: item_slot, value }
                    }
                    SkillKind::ReadFieldAndAnswer => {
                        add_slot(&item_slot, pool_items(false), &mut fixed_item);
                        Skill::ReadFieldAndAnswer { item: item_slot }
                    }
                };
                skills.push(skill);
            }
            let phrases: Vec<String> = skills.iter().enumerate().map(|(i, s)| phrase(s, a + t + i)).collect();
            let body = format!("In {app_id}, {}.", phrases.join(", then "));
            let task_type = if kinds.last() == Some(&SkillKind::ReadFieldAndAnswer) {
                TaskType::InformationRetrieval
            } else {
                TaskType::TaskCompletion
            };
            let template_id = format!("{app_id}.t{t}");
            let template = TaskTemplate {
                template_id: template_id.clone(),
                body,
                slots,
                difficulty: Difficulty::from_skill_count(skills.len()),
                task_type,
                parameterizable: false,
            };
            let template = TaskTemplate { parameterizable: template.can_vary(), ..template };
            tasks.insert(
                template_id.clone(),
                TaskSpec { template_id, app_id: app_id.clone(), skills },
            );
            templates.push(template);
        }
        catalog.apps.push(AppEntry { app_id: app_id.clone(), templates });
        apps.insert(app_id, app);
    }
    Suite { catalog, apps, tasks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    #[test]
    fn default_suite_shape() {
        let s = build_default_suite(&SuiteConfig::default());
        s.catalog.validate().unwrap();
        assert_eq!(s.catalog.apps.len(), 17);
        assert_eq!(s.catalog.template_count(), 119);
        let nonparam = s.catalog.templates().filter(|(_, t)| !t.parameterizable).count();
        assert!((30..=50).contains(&nonparam), "{nonparam}");
        for d in Difficulty::ALL {
            assert!(s.catalog.templates().any(|(_, t)| t.difficulty == d));
        }
    }

    #[test]
    fn every_skill_in_two_apps() {
        let s = build_default_suite(&SuiteConfig::default());
        for kind in SkillKind::ALL {
            let apps: HashSet<&str> = s
                .tasks
                .values()
                .filter(|t| t.skills.iter().any(|k| k.kind() == kind))
                .map(|t| t.app_id.as_str())
                .collect();
            assert!(apps.len() >= 2, "{kind:?} in {} apps", apps.len());
        }
    }

    #[test]
    fn one_app_one_skill() {
        let s = build_default_suite(&SuiteConfig {
            n_apps: 1,
            templates_per_app: 1,
            skills: vec![SkillKind::CreateItem],
            nonparam_every: 0,
            seed: 0,
        });
        let ts: Vec<_> = s.catalog.templates().collect();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].1.difficulty, Difficulty::Easy);
    }

    #[test]
    fn answer_skill_is_last() {
        let s = build_default_suite(&SuiteConfig::default());
        for t in s.tasks.values() {
            for (i, k) in t.skills.iter().enumerate() {
                if k.kind() == SkillKind::ReadFieldAndAnswer {
                    assert_eq!(i, t.skills.len() - 1);
                }
            }
        }
    }

    #[test]
    fn suite_is_seed_deterministic() {
        let a = build_default_suite(&SuiteConfig::default());
        let b = build_default_suite(&SuiteConfig::default());
        assert_eq!(a, b);
        let c = build_default_suite(&SuiteConfig { seed: 1, ..Default::default() });
        assert_ne!(a, c);
    }

    #[test]
    fn candidates_are_unique() {
        let s = build_default_suite(&SuiteConfig::default());
        for app in s.apps.values() {
            let c = app.candidates();
            assert_eq!(c.len(), 16);
            assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 16);
        }
    }
}
