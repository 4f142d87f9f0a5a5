//! A catalog with the shape of the AndroidWorld benchmark: 20 apps, 116
//! templates, 38 of which (in three apps) cannot vary with the seed.

use std::collections::BTreeMap;

use crate::catalog::{AppEntry, TaskCatalog, TaskTemplate};
use crate::cmdp::{Difficulty, TaskType};

/// (app, difficulty level per template)
const USABLE: &[(&str, &[u8])] = &[
    ("AudioRecorder", &[1]),
    ("Clock", &[2]),
    ("OSMAnd", &[1, 2]),
    ("Tasks", &[1, 2, 2, 3]),
    ("Broccoli", &[1, 1, 1, 1, 2, 2, 2, 3]),
    ("Camera", &[1]),
    ("Markor", &[1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 3, 3, 3]),
    ("SimpleCalendar", &[1, 1, 2, 2, 3]),
    ("Expense", &[1, 2, 1, 1, 2]),
    ("Contacts", &[1, 1, 2, 2, 2]),
    ("SimpleSms", &[1, 2, 2, 3, 1]),
    ("OpenTracks", &[1, 2, 2, 3]),
    ("RetroMusic", &[1, 1, 2, 2]),
    ("Gallery", &[1, 1, 2, 3]),
    ("Joplin", &[1, 1, 2, 2]),
    ("Vlc", &[1, 1, 2, 3]),
    ("Files", &[1, 1, 1, 2]),
];

const FIXED: &[(&str, usize)] = &[("SystemSettings", 18), ("Chrome", 10), ("Clipboard", 10)];

const VERBS: &[&str] = &["Create", "Delete", "Edit", "Find", "Rename", "Share", "Archive", "Open"];

const OBJECTS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
];

const DETAILS: &[&str] = &["red", "blue", "green", "amber", "violet", "teal", "ivory", "coral", "slate", "olive"];

fn level(l: u8) -> Difficulty {
    Difficulty::try_from(l).expect("fixture difficulty in 1..=3")
}

/// Builds the fixture catalog.
pub fn reference_catalog() -> TaskCatalog {
    let mut apps = Vec::new();
    for (app, levels) in USABLE {
        let templates = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let slug = app.to_lowercase();
                let verb = VERBS[i % VERBS.len()];
                let mut slots = BTreeMap::new();
                slots.insert("item".to_string(), OBJECTS.iter().map(|s| format!("{slug}-{s}")).collect());
                slots.insert("detail".to_string(), DETAILS.iter().map(|s| s.to_string()).collect());
                let task_type = if i % 4 == 3 { TaskType::InformationRetrieval } else { TaskType::TaskCompletion };
                let body = match task_type {
                    TaskType::InformationRetrieval => {
                        format!("In {app}, report the {{detail}} field of {{item}} (query {i})")
                    }
                    TaskType::TaskCompletion => format!("In {app}, {verb} {{item}} and tag it {{detail}} (task {i})"),
                };
                TaskTemplate {
                    template_id: format!("{app}Task{i}"),
                    body,
                    slots,
                    difficulty: level(l),
                    task_type,
                    parameterizable: true,
                }
            })
            .collect();
        apps.push(AppEntry { app_id: app.to_string(), templates });
    }
    for (app, n) in FIXED {
        let templates = (0..*n)
            .map(|i| {
                // half have no slot, half have a slot whose pool has a single value
                let (body, slots) = if i % 2 == 0 {
                    (format!("In {app}, toggle option {i}"), BTreeMap::new())
                } else {
                    let mut s = BTreeMap::new();
                    s.insert("target".to_string(), vec![format!("default-{i}")]);
                    (format!("In {app}, reset {{target}}"), s)
                };
                TaskTemplate {
                    template_id: format!("{app}Task{i}"),
                    body,
                    slots,
                    difficulty: level(1 + (i % 3) as u8),
                    task_type: TaskType::TaskCompletion,
                    parameterizable: false,
                }
            })
            .collect();
        apps.push(AppEntry { app_id: app.to_string(), templates });
    }
    TaskCatalog { apps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let c = reference_catalog();
        c.validate().unwrap();
        assert_eq!(c.apps.len(), 20);
        assert_eq!(c.template_count(), 116);
        assert_eq!(c.templates().filter(|(_, t)| !t.parameterizable).count(), 38);
        let usable_apps = c.apps.iter().filter(|a| a.templates.iter().any(|t| t.parameterizable)).count();
        assert_eq!(usable_apps, 17);
    }
}
