//! Scripted solutions: drives an environment through a task's skills by
//! reading the observation, the way a perfect agent would.

use std::sync::Arc;

use super::env::{EnvConfig, EnvError, SimEnv};
use super::latency::{FaultModel, LatencyModel};
use super::suite::{Skill, Suite};
use crate::cmdp::{Action, Context, Observation};

fn click_on(obs: &Observation, pred: impl Fn(&crate::cmdp::Widget) -> bool) -> Option<Action> {
    obs.widgets.iter().find(|w| pred(w)).map(|w| {
        let (x, y) = w.bounds.center();
        Action::Click { x, y }
    })
}

fn click_id(obs: &Observation, id: &str) -> Result<Action, EnvError> {
    click_on(obs, |w| w.widget_id == id).ok_or_else(|| EnvError::Setup(format!("solver: no `{id}` on {}", obs.screen_id)))
}

/// Actions for one skill, starting on the main screen.
fn skill_actions(env: &mut SimEnv, skill: &Skill, values: &std::collections::BTreeMap<String, String>, out: &mut Vec<Action>) -> Result<(), EnvError> {
    let mut obs = env.observe();
    let mut act = |env: &mut SimEnv, a: Action, obs: &mut Observation| -> Result<(), EnvError> {
        *obs = env.step(&a)?.observation;
        out.push(a);
        Ok(())
    };
    let search = |env: &mut SimEnv, item: &str, obs: &mut Observation, act: &mut dyn FnMut(&mut SimEnv, Action, &mut Observation) -> Result<(), EnvError>| -> Result<(), EnvError> {
        let c = click_id(obs, "btn_search")?;
        act(env, c, obs)?;
        act(env, Action::Type { content: item.to_string() }, obs)?;
        let c = click_on(obs, |w| w.kind == crate::cmdp::WidgetKind::ListItem && w.text == item)
            .ok_or_else(|| EnvError::Setup(format!("solver: `{item}` not found")))?;
        act(env, c, obs)
    };
    match skill {
        Skill::SearchItem { item } => {
            search(env, &values[item], &mut obs, &mut act)?;
            act(env, Action::PressBack, &mut obs)?;
        }
        Skill::CreateItem { item } => {
            let c = click_id(&obs, "btn_add")?;
            act(env, c, &mut obs)?;
            act(env, Action::Type { content: values[item].clone() }, &mut obs)?;
            let c = click_id(&obs, "btn_save")?;
            act(env, c, &mut obs)?;
        }
        Skill::DeleteItem { item } => {
            search(env, &values[item], &mut obs, &mut act)?;
            let c = click_id(&obs, "btn_delete")?;
            act(env, c, &mut obs)?;
        }
        Skill::ToggleSetting { setting } => {
            let c = click_id(&obs, "btn_settings")?;
            act(env, c, &mut obs)?;
            let name = &values[setting];
            let c = click_on(&obs, |w| w.text.starts_with(&format!("{name} [")))
                .ok_or_else(|| EnvError::Setup(format!("solver: no setting {name}")))?;
            act(env, c, &mut obs)?;
            act(env, Action::PressBack, &mut obs)?;
        }
        Skill::FillForm { item, value } => {
            let c = click_id(&obs, "btn_form")?;
            act(env, c, &mut obs)?;
            act(env, Action::Type { content: values[item].clone() }, &mut obs)?;
            let c = click_on(&obs, |w| w.widget_id == "field_tag").ok_or_else(|| EnvError::Setup("solver: no tag field".into()))?;
            act(env, c, &mut obs)?;
            act(env, Action::Type { content: values[value].clone() }, &mut obs)?;
            let c = click_id(&obs, "btn_submit")?;
            act(env, c, &mut obs)?;
        }
        Skill::ReadFieldAndAnswer { item } => {
            search(env, &values[item], &mut obs, &mut act)?;
            let tag = obs
                .widgets
                .iter()
                .find_map(|w| w.text.strip_prefix("tag: ").map(str::to_string))
                .ok_or_else(|| EnvError::Setup("solver: no tag label".into()))?;
            act(env, Action::Answer { content: tag }, &mut obs)?;
        }
    }
    Ok(())
}

/// Scripted action sequence solving `ctx`, ending with Finished or Answer.
pub fn solve(suite: &Arc<Suite>, ctx: &Context) -> Result<Vec<Action>, EnvError> {
    let cfg = EnvConfig { latency: LatencyModel::zero(), faults: FaultModel::default(), ..EnvConfig::default() };
    let mut env = SimEnv::new(suite.clone(), cfg);
    env.reset(ctx, 0)?;
    let task = env.resolved_task().cloned().expect("reset done");
    let mut out = Vec::new();
    for skill in &task.spec.skills {
        skill_actions(&mut env, skill, &task.values, &mut out)?;
    }
    if !env.is_done() {
        out.push(Action::Finished { content: String::new() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::DEFAULT_STEP_CAP;
    use crate::sim::suite::{build_default_suite, SuiteConfig};

    /// Every template of the default suite is solvable within the step cap
    /// for a spread of instance seeds.
    #[test]
    fn all_templates_solvable() {
        let suite = Arc::new(build_default_suite(&SuiteConfig::default()));
        let mut longest = 0;
        for (app, t) in suite.catalog.templates() {
            for seed in [1u64, 7, 30, 1234, 99] {
                let ctx = Context::new(app, t, seed).unwrap();
                let actions = solve(&suite, &ctx).unwrap();
                assert!(actions.len() <= DEFAULT_STEP_CAP);
                longest = longest.max(actions.len());
                let mut env = SimEnv::new(suite.clone(), EnvConfig { latency: LatencyModel::zero(), ..Default::default() });
                env.reset(&ctx, 3).unwrap();
                let mut last = None;
                for a in &actions {
                    last = Some(env.step(a).unwrap());
                }
                let last = last.unwrap();
                assert!(last.done, "{}", ctx.template_id);
                assert_eq!(last.reward, Some(1), "{} seed {seed}: {actions:?}", ctx.template_id);
            }
        }
        assert!(longest >= 10);
    }
}
