//! The mini-app environment: a finite-state machine over screens, driven by
//! GUI actions, scored by a rule script at termination.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::latency::{ClockMode, FaultEvent, FaultModel, LatencyModel};
use super::reward::{wrap_noisy_judge, FinalState, Predicate, RewardScript, Store};
use super::suite::{MainButton, MiniApp, Skill, Suite, TaskSpec};
use crate::catalog;
use crate::cmdp::{Action, Context, Observation, Rect, Widget, WidgetKind, DEFAULT_STEP_CAP};
use crate::hashing;

pub const GRID_COLS: i32 = 16;
pub const GRID_ROWS: i32 = 8;
pub const CELL_W: i32 = crate::cmdp::SCREEN_WIDTH / GRID_COLS;
pub const CELL_H: i32 = crate::cmdp::SCREEN_HEIGHT / GRID_ROWS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("setup error: {0}")]
    Setup(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("environment crashed at step {step}")]
    Crashed { step: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub step_cap: usize,
    pub latency: LatencyModel,
    pub faults: FaultModel,
    #[serde(default)]
    pub judge: Option<JudgeConfig>,
    pub clock: ClockMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step_cap: DEFAULT_STEP_CAP,
            latency: LatencyModel::default(),
            faults: FaultModel::default(),
            judge: None,
            clock: ClockMode::Simulated,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.step_cap == 0 {
            return Err("step_cap must be at least 1".into());
        }
        self.latency.validate()?;
        self.faults.validate()?;
        if let Some(j) = &self.judge {
            if !(0.0..=1.0).contains(&j.fp_rate) || !(0.0..=1.0).contains(&j.fn_rate) {
                return Err("judge rates must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "screen", content = "arg", rename_all = "snake_case")]
pub enum Screen {
    Launcher,
    Main,
    Search,
    Detail(String),
    Editor,
    Settings,
    Form,
    Foreign(String),
}

impl Screen {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Screen::Launcher => "launcher",
            Screen::Main => "main",
            Screen::Search => "search",
            Screen::Detail(_) => "detail",
            Screen::Editor => "editor",
            Screen::Settings => "settings",
            Screen::Form => "form",
            Screen::Foreign(_) => "foreign",
        }
    }
}

pub const SCREEN_KINDS: [&str; 8] = ["launcher", "main", "search", "detail", "editor", "settings", "form", "foreign"];

#[derive(Clone, Debug, PartialEq, Eq)]
enum Role {
    Inert,
    Open(MainButton),
    ResultRow(String),
    Delete(String),
    Save,
    Toggle(String),
    FocusA,
    FocusB,
    Submit,
    LaunchOwn,
    LaunchOther(String),
    Field,
}

/// Transient UI state plus the persistent store.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppState {
    pub store: Store,
    pub query: String,
    pub editor: String,
    pub form_a: String,
    pub form_b: String,
    pub form_focus_b: bool,
}

pub fn cell_rect(col: i32, row: i32, w: i32, h: i32) -> Rect {
    Rect { x: col * CELL_W, y: row * CELL_H, w: w * CELL_W, h: h * CELL_H }
}

fn main_slots(family: u8) -> [(i32, i32); 4] {
    match family {
        0 => [(1, 2), (9, 2), (1, 4), (9, 4)],
        1 => [(0, 1), (0, 3), (0, 5), (0, 7)],
        _ => [(0, 6), (4, 6), (8, 6), (12, 6)],
    }
}

fn action_slot(family: u8, which: &str) -> (i32, i32) {
    match (family, which) {
        (0, "delete") => (12, 7),
        (1, "delete") => (0, 6),
        (_, "delete") => (6, 5),
        (0, "save") => (12, 1),
        (1, "save") => (0, 3),
        (_, "save") => (12, 7),
        (0, _) => (12, 7),
        (1, _) => (0, 5),
        (_, _) => (8, 4),
    }
}

fn launcher_apps(app: &MiniApp) -> Vec<String> {
    let mut v = app.neighbours.clone();
    let pos = (hashing::fnv1a_str(&app.app_id) % (v.len() as u64 + 1)) as usize;
    v.insert(pos, app.app_id.clone());
    v
}

/// Widgets with their click roles for the given screen.
fn render(app: &MiniApp, st: &AppState, screen: &Screen) -> Vec<(Widget, Role)> {
    let w = |id: &str, kind: WidgetKind, text: &str, bounds: Rect, focused: bool| Widget {
        widget_id: id.to_string(),
        kind,
        text: text.to_string(),
        bounds,
        focused,
    };
    let mut out = Vec::new();
    let fam = app.layout_family;
    match screen {
        Screen::Launcher => {
            for (i, name) in launcher_apps(app).iter().enumerate() {
                let i = i as i32;
                let role = if *name == app.app_id { Role::LaunchOwn } else { Role::LaunchOther(name.clone()) };
                out.push((
                    w(&format!("icon{i}"), WidgetKind::Button, name, cell_rect(4 * (i % 4), 1 + 2 * (i / 4), 4, 1), false),
                    role,
                ));
            }
        }
        Screen::Main => {
            out.push((w("title", WidgetKind::Label, &app.app_id, cell_rect(0, 0, 16, 1), false), Role::Inert));
            for (slot, (c, r)) in main_slots(fam).iter().enumerate() {
                let b = app.main_order[slot];
                out.push((
                    {
                        let role = b.label().to_lowercase();
                        w(&format!("btn_{role}"), WidgetKind::Button, app.text(&role), cell_rect(*c, *r, 4, 1), false)
                    },
                    Role::Open(b),
                ));
            }
        }
        Screen::Search => {
            out.push((w("query", WidgetKind::TextField, &st.query, cell_rect(0, 1, 12, 1), true), Role::Field));
            if st.store.items.contains_key(&st.query) {
                out.push((w("row0", WidgetKind::ListItem, &st.query, cell_rect(0, 3, 16, 1), false), Role::ResultRow(st.query.clone())));
            } else if !st.query.is_empty() {
                out.push((w("empty", WidgetKind::Label, "No results", cell_rect(0, 3, 16, 1), false), Role::Inert));
            }
        }
        Screen::Detail(item) => {
            let tag = st.store.items.get(item).cloned().unwrap_or_default();
            out.push((w("name", WidgetKind::Label, item, cell_rect(0, 1, 16, 1), false), Role::Inert));
            out.push((w("tag", WidgetKind::Label, &format!("tag: {tag}"), cell_rect(0, 2, 16, 1), false), Role::Inert));
            let (c, r) = action_slot(fam, "delete");
            out.push((w("btn_delete", WidgetKind::Button, app.text("delete"), cell_rect(c, r, 4, 1), false), Role::Delete(item.clone())));
        }
        Screen::Editor => {
            out.push((w("new_name", WidgetKind::TextField, &st.editor, cell_rect(0, 1, 12, 1), true), Role::Field));
            let (c, r) = action_slot(fam, "save");
            out.push((w("btn_save", WidgetKind::Button, app.text("save"), cell_rect(c, r, 4, 1), false), Role::Save));
        }
        Screen::Settings => {
            for (i, name) in app.settings.iter().enumerate() {
                let on = st.store.settings.get(name).copied().unwrap_or(false);
                let text = format!("{name} [{}]", if on { "on" } else { "off" });
                out.push((
                    w(&format!("setting{i}"), WidgetKind::Toggle, &text, cell_rect(0, 1 + i as i32, 16, 1), false),
                    Role::Toggle(name.clone()),
                ));
            }
        }
        Screen::Form => {
            out.push((w("field_name", WidgetKind::TextField, &st.form_a, cell_rect(0, 1, 8, 1), !st.form_focus_b), Role::FocusA));
            out.push((w("field_tag", WidgetKind::TextField, &st.form_b, cell_rect(0, 2, 8, 1), st.form_focus_b), Role::FocusB));
            let (c, r) = action_slot(fam, "submit");
            out.push((w("btn_submit", WidgetKind::Button, app.text("submit"), cell_rect(c, r, 4, 1), false), Role::Submit));
        }
        Screen::Foreign(name) => {
            out.push((w("foreign", WidgetKind::Label, name, cell_rect(0, 1, 16, 1), false), Role::Inert));
        }
    }
    out
}

/// Resolved task for one context: slot values, reward script, ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTask {
    pub spec: TaskSpec,
    pub values: BTreeMap<String, String>,
    pub script: RewardScript,
    pub answer: Option<String>,
}

pub fn resolve_task(suite: &Suite, ctx: &Context) -> Result<ResolvedTask, EnvError> {
    let app = suite.app(&ctx.app_id).ok_or_else(|| EnvError::Setup(format!("unknown app {}", ctx.app_id)))?;
    let spec = suite
        .task(&ctx.template_id)
        .ok_or_else(|| EnvError::Setup(format!("unknown template {}", ctx.template_id)))?;
    if spec.app_id != ctx.app_id {
        return Err(EnvError::Setup(format!("template {} does not belong to app {}", ctx.template_id, ctx.app_id)));
    }
    let (_, template) = suite
        .catalog
        .find_template(&ctx.template_id)
        .ok_or_else(|| EnvError::Setup(format!("template {} missing from catalog", ctx.template_id)))?;
    let values = catalog::instantiate(template, ctx.instance_seed).map_err(|e| EnvError::Setup(e.to_string()))?;
    let get = |slot: &str| values[slot].clone();
    let mut predicates = Vec::new();
    let mut answer = None;
    for skill in &spec.skills {
        match skill {
            Skill::SearchItem { item } => predicates.push(Predicate::Viewed { item: get(item) }),
            Skill::CreateItem { item } => predicates.push(Predicate::Exists { item: get(item) }),
            Skill::DeleteItem { item } => predicates.push(Predicate::Absent { item: get(item) }),
            Skill::ToggleSetting { setting } => predicates.push(Predicate::SettingOn { setting: get(setting) }),
            Skill::FillForm { item, value } => {
                predicates.push(Predicate::FormSubmitted { item: get(item), value: get(value) })
            }
            Skill::ReadFieldAndAnswer { item } => {
                let truth = app.tags[&get(item)].clone();
                predicates.push(Predicate::AnswerEquals { truth: truth.clone() });
                answer = Some(truth);
            }
        }
    }
    Ok(ResolvedTask { spec: spec.clone(), values, script: RewardScript::Rule { predicates }, answer })
}

fn initial_state(app: &MiniApp) -> AppState {
    let mut st = AppState::default();
    for it in app.initial_items() {
        st.store.items.insert(it.clone(), app.tags[it].clone());
    }
    for s in &app.settings {
        st.store.settings.insert(s.clone(), false);
    }
    st
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub truncated: bool,
    /// Training reward (rule script, or judge when configured); set when done.
    pub reward: Option<u8>,
    /// Rule-script reward; set when done.
    pub true_reward: Option<u8>,
    pub latency_ms: f64,
}

struct Episode {
    ctx: Context,
    key: u64,
    app: MiniApp,
    task: ResolvedTask,
    script: RewardScript,
    state: AppState,
    screen: Screen,
    step: u32,
    done: bool,
}

/// One single-threaded environment instance.
pub struct SimEnv {
    suite: Arc<Suite>,
    cfg: EnvConfig,
    episode: Option<Episode>,
}

impl SimEnv {
    pub fn new(suite: Arc<Suite>, cfg: EnvConfig) -> Self {
        SimEnv { suite, cfg, episode: None }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn suite(&self) -> &Arc<Suite> {
        &self.suite
    }

    pub fn reset(&mut self, ctx: &Context, episode_seed: u64) -> Result<Observation, EnvError> {
        let task = resolve_task(&self.suite, ctx)?;
        let app = self.suite.apps[&ctx.app_id].clone();
        let script = match &self.cfg.judge {
            Some(j) => wrap_noisy_judge(task.script.clone(), j.fp_rate, j.fn_rate, j.seed)
                .map_err(|e| EnvError::Setup(e.to_string()))?,
            None => task.script.clone(),
        };
        let state = initial_state(&app);
        let key = hashing::combine(&[ctx.key(), episode_seed]);
        self.episode = Some(Episode {
            ctx: ctx.clone(),
            key,
            app,
            task,
            script,
            state,
            screen: Screen::Main,
            step: 0,
            done: false,
        });
        Ok(self.observe())
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.done)
    }

    pub fn current_screen(&self) -> Option<&Screen> {
        self.episode.as_ref().map(|e| &e.screen)
    }

    pub fn resolved_task(&self) -> Option<&ResolvedTask> {
        self.episode.as_ref().map(|e| &e.task)
    }

    pub fn store(&self) -> Option<&Store> {
        self.episode.as_ref().map(|e| &e.state.store)
    }

    pub fn observe(&self) -> Observation {
        let e = self.episode.as_ref().expect("observe after reset");
        Observation {
            screen_id: format!("{}/{}", e.app.app_id, e.screen.kind_name()),
            widgets: render(&e.app, &e.state, &e.screen).into_iter().map(|(w, _)| w).collect(),
            step_index: e.step,
            candidates: Some(e.app.candidates()),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let cap = self.cfg.step_cap;
        let e = self
            .episode
            .as_mut()
            .ok_or_else(|| EnvError::Protocol("step before reset".into()))?;
        if e.done {
            return Err(EnvError::Protocol("step after episode finished".into()));
        }
        let fault = self.cfg.faults.decide(e.key, e.step);
        if fault == FaultEvent::Crash {
            e.done = true;
            return Err(EnvError::Crashed { step: e.step });
        }
        let before = e.screen.clone();
        let mut terminal_answer: Option<Option<String>> = None;
        match action {
            Action::Click { x, y } => {
                let widgets = render(&e.app, &e.state, &e.screen);
                let hit = widgets.iter().rev().find(|(w, _)| w.bounds.contains(*x, *y)).map(|(_, r)| r.clone());
                if let Some(role) = hit {
                    apply_role(e, role);
                }
            }
            Action::Type { content } => match e.screen {
                Screen::Search => e.state.query = content.clone(),
                Screen::Editor => e.state.editor = content.clone(),
                Screen::Form => {
                    if e.state.form_focus_b {
                        e.state.form_b = content.clone()
                    } else {
                        e.state.form_a = content.clone()
                    }
                }
                _ => {}
            },
            Action::LongPress { .. } | Action::Scroll { .. } => {}
            Action::PressHome => e.screen = Screen::Launcher,
            Action::PressBack => {
                e.screen = match e.screen {
                    Screen::Main | Screen::Launcher | Screen::Foreign(_) => Screen::Launcher,
                    _ => Screen::Main,
                }
            }
            Action::OpenApp { app } => {
                e.screen = if *app == e.app.app_id { Screen::Main } else { Screen::Foreign(app.clone()) };
            }
            Action::Finished { .. } => terminal_answer = Some(None),
            Action::Answer { content } => terminal_answer = Some(Some(content.clone())),
        }
        if e.screen != before {
            if let Screen::Search = e.screen {
                e.state.query.clear();
            }
            if let Screen::Editor = e.screen {
                e.state.editor.clear();
            }
            if let Screen::Form = e.screen {
                e.state.form_a.clear();
                e.state.form_b.clear();
                e.state.form_focus_b = false;
            }
        }
        let mut latency = self.cfg.latency.sample(action.kind(), e.screen != before, e.key, e.step);
        if fault == FaultEvent::Hang {
            latency += self.cfg.faults.hang_ms;
        }
        e.step += 1;
        let truncated = terminal_answer.is_none() && e.step as usize >= cap;
        let done = terminal_answer.is_some() || truncated;
        let (reward, true_reward) = if done {
            e.done = true;
            let answer = terminal_answer.clone().flatten();
            let screen_id = format!("{}/{}", e.app.app_id, e.screen.kind_name());
            let f = FinalState { store: &e.state.store, screen_id: &screen_id, answer: answer.as_deref(), truncated };
            (Some(e.script.score(&f, e.key)), Some(e.script.rule().score(&f, e.key)))
        } else {
            (None, None)
        };
        if self.cfg.clock == ClockMode::Real && latency > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(latency / 1000.0));
        }
        Ok(StepOutcome { observation: self.observe(), done, truncated, reward, true_reward, latency_ms: latency })
    }

    pub fn context(&self) -> Option<&Context> {
        self.episode.as_ref().map(|e| &e.ctx)
    }
}

fn apply_role(e: &mut Episode, role: Role) {
    let st = &mut e.state;
    match role {
        Role::Inert | Role::Field => {}
        Role::Open(b) => {
            e.screen = match b {
                MainButton::Search => Screen::Search,
                MainButton::Add => Screen::Editor,
                MainButton::Settings => Screen::Settings,
                MainButton::Form => Screen::Form,
            }
        }
        Role::ResultRow(item) => {
            st.store.viewed.insert(item.clone());
            e.screen = Screen::Detail(item);
        }
        Role::Delete(item) => {
            st.store.items.remove(&item);
            e.screen = Screen::Main;
        }
        Role::Save => {
            if !st.editor.is_empty() && !st.store.items.contains_key(&st.editor) {
                st.store.items.insert(st.editor.clone(), String::new());
                e.screen = Screen::Main;
            }
        }
        Role::Toggle(name) => {
            let v = st.store.settings.entry(name).or_insert(false);
            *v = !*v;
        }
        Role::FocusA => st.form_focus_b = false,
        Role::FocusB => st.form_focus_b = true,
        Role::Submit => {
            if !st.form_a.is_empty() && !st.form_b.is_empty() {
                st.store.forms.push((st.form_a.clone(), st.form_b.clone()));
                e.screen = Screen::Main;
            }
        }
        Role::LaunchOwn => e.screen = Screen::Main,
        Role::LaunchOther(name) => e.screen = Screen::Foreign(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::suite::{build_default_suite, SuiteConfig};

    fn env() -> (SimEnv, Context) {
        let suite = Arc::new(build_default_suite(&SuiteConfig::default()));
        let (app, t) = suite
            .catalog
            .templates()
            .find(|(_, t)| suite.tasks[&t.template_id].skills.len() == 1 && matches!(suite.tasks[&t.template_id].skills[0], Skill::CreateItem { .. }))
            .expect("a single create template");
        let ctx = Context::new(app, t, 5).unwrap();
        (SimEnv::new(suite.clone(), EnvConfig::default()), ctx)
    }

    fn click_id(obs: &Observation, id: &str) -> Action {
        let w = obs.widgets.iter().find(|w| w.widget_id == id).unwrap_or_else(|| panic!("no widget {id}"));
        let (x, y) = w.bounds.center();
        Action::Click { x, y }
    }

    #[test]
    fn reset_is_deterministic() {
        let (mut e, ctx) = env();
        let a = e.reset(&ctx, 1).unwrap();
        let b = e.reset(&ctx, 1).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn create_note_solution() {
        let (mut e, ctx) = env();
        let obs = e.reset(&ctx, 0).unwrap();
        let item = e.resolved_task().unwrap().values["item1"].clone();
        let o = e.step(&click_id(&obs, "btn_add")).unwrap().observation;
        assert_eq!(o.screen_kind(), "editor");
        let o = e.step(&Action::Type { content: item.clone() }).unwrap().observation;
        let o = e.step(&click_id(&o, "btn_save")).unwrap().observation;
        assert_eq!(o.screen_kind(), "main");
        let r = e.step(&Action::Finished { content: String::new() }).unwrap();
        assert!(r.done && !r.truncated);
        assert_eq!(r.reward, Some(1));
        assert_eq!(r.true_reward, Some(1));
        assert!(e.step(&Action::PressHome).is_err());
    }

    #[test]
    fn step_cap_truncates() {
        let (mut e, ctx) = env();
        e.reset(&ctx, 0).unwrap();
        for i in 0..DEFAULT_STEP_CAP {
            let r = e.step(&Action::Scroll { direction: crate::cmdp::ScrollDirection::Down }).unwrap();
            assert_eq!(r.done, i + 1 == DEFAULT_STEP_CAP);
            if r.done {
                assert!(r.truncated);
                assert_eq!(r.reward, Some(0));
            } else {
                assert_eq!(r.reward, None);
            }
        }
        assert!(matches!(e.step(&Action::PressBack), Err(EnvError::Protocol(_))));
    }

    #[test]
    fn home_reachable_from_every_screen() {
        let (mut e, ctx) = env();
        let obs = e.reset(&ctx, 0).unwrap();
        for label in ["btn_search", "btn_add", "btn_settings", "btn_form"] {
            e.reset(&ctx, 0).unwrap();
            e.step(&click_id(&obs, label)).unwrap();
            let r = e.step(&Action::PressHome).unwrap();
            assert_eq!(r.observation.screen_kind(), "launcher");
        }
        e.reset(&ctx, 0).unwrap();
        e.step(&Action::OpenApp { app: "Elsewhere".into() }).unwrap();
        assert_eq!(e.step(&Action::PressHome).unwrap().observation.screen_kind(), "launcher");
    }

    #[test]
    fn click_miss_is_noop() {
        let (mut e, ctx) = env();
        let obs = e.reset(&ctx, 0).unwrap();
        // top-right corner of the title row is covered by the title label only
        let r = e.step(&Action::Click { x: 1119, y: 503 }).unwrap();
        if obs.hit_test(1119, 503).is_none() {
            assert_eq!(r.observation.screen_id, obs.screen_id);
        }
    }

    #[test]
    fn unknown_template_is_setup_error() {
        let (mut e, mut ctx) = env();
        ctx.template_id = "nope".into();
        assert!(matches!(e.reset(&ctx, 0), Err(EnvError::Setup(_))));
    }

    #[test]
    fn different_seeds_change_targets() {
        let (e, ctx) = env();
        let suite = e.suite().clone();
        let (_, t) = suite.catalog.find_template(&ctx.template_id).unwrap();
        let targets: std::collections::BTreeSet<String> = (0..40)
            .map(|s| resolve_task(&suite, &Context::new(&ctx.app_id, t, s).unwrap()).unwrap().values["item1"].clone())
            .collect();
        assert!(targets.len() > 1 || !t.parameterizable);
    }

    #[test]
    fn observations_are_valid_on_all_screens() {
        let (mut e, ctx) = env();
        let obs = e.reset(&ctx, 0).unwrap();
        obs.validate().unwrap();
        for label in ["btn_search", "btn_add", "btn_settings", "btn_form"] {
            e.reset(&ctx, 0).unwrap();
            e.step(&click_id(&obs, label)).unwrap().observation.validate().unwrap();
        }
        e.step(&Action::PressHome).unwrap().observation.validate().unwrap();
    }
}
