//! Task catalogs and seeded template instantiation.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{Difficulty, TaskType};
use crate::hashing;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: unknown slot `{slot}` in body")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template}: slot `{slot}` has an empty value pool")]
    EmptyPool { template: String, slot: String },
    #[error("template {template}: unbalanced braces in body")]
    Malformed { template: String },
}

/// A parameterized task description. Slots are written `{name}` in `body`
/// and filled from `slots[name]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub template_id: String,
    pub body: String,
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
    pub difficulty: Difficulty,
    pub task_type: TaskType,
    pub parameterizable: bool,
}

impl TaskTemplate {
    /// Slot names in order of first appearance in the body.
    pub fn slot_order(&self) -> Result<Vec<String>, TemplateError> {
        let mut out: Vec<String> = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| TemplateError::Malformed {
                template: self.template_id.clone(),
            })?;
            let name = &after[..close];
            if name.contains('{') {
                return Err(TemplateError::Malformed {
                    template: self.template_id.clone(),
                });
            }
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
            rest = &after[close + 1..];
        }
        if rest.contains('}') {
            return Err(TemplateError::Malformed {
                template: self.template_id.clone(),
            });
        }
        Ok(out)
    }

    /// Whether distinct seeds can produce distinct instructions.
    pub fn can_vary(&self) -> bool {
        self.slot_order()
            .map(|order| {
                order
                    .iter()
                    .any(|s| self.slots.get(s).is_some_and(|p| p.len() > 1))
            })
            .unwrap_or(false)
    }
}

/// Draws slot values for `(template, seed)`. Slots sharing an identical pool
/// receive distinct values while the pool allows it.
pub fn instantiate(template: &TaskTemplate, seed: u64) -> Result<BTreeMap<String, String>, TemplateError> {
    let order = template.slot_order()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(&[
        hashing::fnv1a_str(&template.template_id),
        seed,
    ]));
    let mut values = BTreeMap::new();
    let mut taken: Vec<(&Vec<String>, &String)> = Vec::new();
    for name in &order {
        let pool = template.slots.get(name).ok_or_else(|| TemplateError::UnknownSlot {
            template: template.template_id.clone(),
            slot: name.clone(),
        })?;
        if pool.is_empty() {
            return Err(TemplateError::EmptyPool {
                template: template.template_id.clone(),
                slot: name.clone(),
            });
        }
        let free: Vec<&String> = pool
            .iter()
            .filter(|v| !taken.iter().any(|(p, t)| *p == pool && *t == *v))
            .collect();
        let pick = if free.is_empty() {
            pool.choose(&mut rng).expect("non-empty pool")
        } else {
            *free.choose(&mut rng).expect("non-empty free list")
        };
        taken.push((pool, pick));
        values.insert(name.clone(), pick.clone());
    }
    Ok(values)
}

/// Renders the instruction for `(template, seed)`; a pure function of both.
pub fn render_instruction(template: &TaskTemplate, seed: u64) -> Result<String, TemplateError> {
    let values = instantiate(template, seed)?;
    Ok(fill(&template.body, &values))
}

pub(crate) fn fill(body: &str, values: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(body.len() + 16);
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').expect("validated by slot_order");
        out.push_str(&values[&after[..close]]);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppEntry {
    pub app_id: String,
    pub templates: Vec<TaskTemplate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCatalog {
    pub apps: Vec<AppEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogValidationError {
    #[error("duplicate template id {0}")]
    DuplicateTemplate(String),
    #[error("duplicate app id {0}")]
    DuplicateApp(String),
    #[error("template {0}: parameterizable flag disagrees with its slot pools")]
    ParameterizableMismatch(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl TaskCatalog {
    pub fn templates(&self) -> impl Iterator<Item = (&str, &TaskTemplate)> {
        self.apps
            .iter()
            .flat_map(|a| a.templates.iter().map(move |t| (a.app_id.as_str(), t)))
    }

    pub fn template_count(&self) -> usize {
        self.apps.iter().map(|a| a.templates.len()).sum()
    }

    pub fn find_template(&self, template_id: &str) -> Option<(&str, &TaskTemplate)> {
        self.templates().find(|(_, t)| t.template_id == template_id)
    }

    pub fn app(&self, app_id: &str) -> Option<&AppEntry> {
        self.apps.iter().find(|a| a.app_id == app_id)
    }

    pub fn validate(&self) -> Result<(), CatalogValidationError> {
        let mut apps = HashSet::new();
        let mut ids = HashSet::new();
        for app in &self.apps {
            if !apps.insert(app.app_id.as_str()) {
                return Err(CatalogValidationError::DuplicateApp(app.app_id.clone()));
            }
            for t in &app.templates {
                if !ids.insert(t.template_id.as_str()) {
                    return Err(CatalogValidationError::DuplicateTemplate(t.template_id.clone()));
                }
                t.slot_order()?;
                instantiate(t, 0)?;
                if t.parameterizable != t.can_vary() {
                    return Err(CatalogValidationError::ParameterizableMismatch(t.template_id.clone()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl(body: &str, slots: &[(&str, &[&str])]) -> TaskTemplate {
        TaskTemplate {
            template_id: "notes_create".into(),
            body: body.into(),
            slots: slots
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            difficulty: Difficulty::Easy,
            task_type: TaskType::TaskCompletion,
            parameterizable: true,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let t = tpl(
            "Create a note named {file_name} with: {text}",
            &[("file_name", &["todo", "ideas", "groceries", "plan"]), ("text", &["buy milk", "call bob", "gym", "read"])],
        );
        let a = render_instruction(&t, 7).unwrap();
        assert_eq!(a, render_instruction(&t, 7).unwrap());
        assert!(a.starts_with("Create a note named "));
    }

    #[test]
    fn zero_slot_template_renders_verbatim() {
        let t = tpl("Turn on dark mode", &[]);
        for seed in [0, 1, 42, u64::MAX] {
            assert_eq!(render_instruction(&t, seed).unwrap(), "Turn on dark mode");
        }
        assert!(!t.can_vary());
    }

    #[test]
    fn unknown_slot_is_an_error() {
        let t = tpl("Delete {missing}", &[]);
        assert!(matches!(render_instruction(&t, 1), Err(TemplateError::UnknownSlot { .. })));
        let t = tpl("Delete {oops", &[]);
        assert!(matches!(render_instruction(&t, 1), Err(TemplateError::Malformed { .. })));
    }

    #[test]
    fn eval_and_train_seed_render_distinct_instructions() {
        // Pool assignments are enumerable: 4 x 4 = 16 possible renderings.
        let t = tpl(
            "Create a note named {file_name} with: {text}",
            &[("file_name", &["todo", "ideas", "groceries", "plan"]), ("text", &["buy milk", "call bob", "gym", "read"])],
        );
        let mut all = HashSet::new();
        for f in &t.slots["file_name"] {
            for x in &t.slots["text"] {
                all.insert(format!("Create a note named {f} with: {x}"));
            }
        }
        let eval = render_instruction(&t, 30).unwrap();
        let train = render_instruction(&t, 1).unwrap();
        assert!(all.contains(&eval) && all.contains(&train));
        assert_ne!(eval, train);
    }

    #[test]
    fn shared_pool_slots_get_distinct_values() {
        let t = tpl("Create {a} then delete {b}", &[("a", &["x", "y"]), ("b", &["x", "y"])]);
        for seed in 0..50 {
            let v = instantiate(&t, seed).unwrap();
            assert_ne!(v["a"], v["b"]);
        }
    }

    #[test]
    fn repeated_slot_uses_one_value() {
        let t = tpl("{a} and again {a}", &[("a", &["p", "q", "r"])]);
        let s = render_instruction(&t, 3).unwrap();
        let parts: Vec<&str> = s.split(" and again ").collect();
        assert_eq!(parts[0], parts[1]);
    }

    #[test]
    fn catalog_validation_catches_flag_mismatch() {
        let mut t = tpl("Turn on {s}", &[("s", &["wifi"])]);
        t.parameterizable = true;
        let cat = TaskCatalog {
            apps: vec![AppEntry { app_id: "settings".into(), templates: vec![t] }],
        };
        assert_eq!(
            cat.validate(),
            Err(CatalogValidationError::ParameterizableMismatch("notes_create".into()))
        );
    }
}
