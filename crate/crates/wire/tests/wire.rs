use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mobirl_core::cmdp::{Action, AgentState, Context};
use mobirl_core::hashing::combine;
use mobirl_core::policy::{MaskOptions, PolicyConfig, PolicyParams};
use mobirl_core::rollout::{collect, CollectMode, Decode, EnvFailure, EnvWorker, RolloutPlan, WorkerPool};
use mobirl_core::sim::{build_default_suite, ClockMode, EnvConfig, FaultModel, SimEnv, Suite, SuiteConfig};
use mobirl_wire::protocol::*;
use mobirl_wire::{run_blocking, spawn_worker_pool, spawn_workers, EnvClient, HttpWorker, LaunchSpec, ServeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn suite() -> Arc<Suite> {
    Arc::new(build_default_suite(&SuiteConfig::default()))
}

fn contexts(suite: &Suite, seed: u64) -> Vec<Context> {
    suite.catalog.templates().map(|(app, t)| Context::new(app, t, seed).unwrap()).collect()
}

fn in_process(cfg: EnvConfig) -> String {
    let (tx, rx) = mpsc::channel();
    let suite = suite();
    std::thread::spawn(move || {
        let serve = ServeConfig { worker_id: 3, env: cfg, exit_on_crash: false, log: false };
        run_blocking("127.0.0.1:0".parse().unwrap(), suite, serve, |a| tx.send(a).unwrap()).unwrap();
    });
    format!("http://{}", rx.recv().unwrap())
}

fn spec_with_env(env: &EnvConfig, dir: &tempfile::TempDir, extra: &[&str]) -> LaunchSpec {
    let path = dir.path().join(format!("env-{}.json", combine(&[extra.len() as u64, env.faults.seed])));
    std::fs::write(&path, serde_json::to_vec(env).unwrap()).unwrap();
    let mut args = vec!["--env".to_string(), path.display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    LaunchSpec { program: PathBuf::from(env!("CARGO_BIN_EXE_mobirl-worker")), args, ..LaunchSpec::default() }
}

fn policy(suite: &Suite, seed: u64) -> PolicyParams<f64> {
    let mut c = PolicyConfig::new(suite.app_names());
    c.hidden = 8;
    let mut p = PolicyParams::init(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.theta.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    p
}

fn post_raw(base: &str, path: &str, body: &str) -> u16 {
    let agent = ureq::Agent::config_builder().http_status_as_error(false).build().new_agent();
    agent.post(&format!("{base}{path}")).header("content-type", "application/json").send(body).unwrap().status().as_u16()
}

#[test]
fn session_rules() {
    let base = in_process(EnvConfig::default());
    let c = EnvClient::new(&base, Duration::from_secs(5), 1);
    let h = c.health().unwrap();
    assert_eq!((h.status, h.worker_id, h.active_session), (WorkerStatus::Idle, 3, None));

    let s = suite();
    let ctx = contexts(&s, 2)[0].clone();
    let r = c.reset(&ResetRequest { context: ctx.clone(), episode_seed: 0 }).unwrap();
    let h = c.health().unwrap();
    assert_eq!(h.status, WorkerStatus::Busy);
    assert_eq!(h.active_session.as_deref(), Some(r.session_id.as_str()));
    assert_eq!(c.reset(&ResetRequest { context: ctx.clone(), episode_seed: 0 }), Err(EnvFailure::ServerError(409)));

    let bogus = StepRequest { session_id: "nope".into(), action: Action::PressBack };
    assert_eq!(c.step(&bogus), Err(EnvFailure::ServerError(409)));
    assert_eq!(post_raw(&base, "/step", "{not json"), 400);
    assert_eq!(post_raw(&base, "/reset", "{\"episode_seed\": 1}"), 400);

    let rec = c.session().unwrap().unwrap();
    assert_eq!((rec.session_id.as_str(), rec.step_count, rec.terminal.is_none()), (r.session_id.as_str(), 0, true));

    // run out the step cap, then the session is terminal
    let mut last = None;
    for _ in 0..EnvConfig::default().step_cap {
        last = Some(c.step(&StepRequest { session_id: r.session_id.clone(), action: Action::PressBack }).unwrap());
    }
    let last = last.unwrap();
    assert!(last.done && last.truncated && last.reward == Some(0));
    assert_eq!(c.step(&StepRequest { session_id: r.session_id.clone(), action: Action::PressBack }), Err(EnvFailure::ServerError(409)));
    assert_eq!(c.session().unwrap().unwrap().terminal, Some(Terminal { reward: 0, truncated: true }));
    assert_eq!(c.health().unwrap().status, WorkerStatus::Idle);

    let r2 = c.reset(&ResetRequest { context: ctx, episode_seed: 1 }).unwrap();
    assert_ne!(r2.session_id, r.session_id);
    assert!(!c.abort("nope").unwrap().ok);
    assert!(c.abort(&r2.session_id).unwrap().ok);
    assert_eq!(c.session().unwrap(), None);
}

#[test]
fn over_wire_episodes_match_in_process() {
    let s = suite();
    let dir = tempfile::tempdir().unwrap();
    let env = EnvConfig::default();
    let (workers, report) = spawn_worker_pool(8, &spec_with_env(&env, &dir, &[])).unwrap();
    assert_eq!(report.ready.len(), 8);
    let ctxs = contexts(&s, 17);
    let p = policy(&s, 1);
    let episodes = 500;
    let checked: usize = std::thread::scope(|scope| {
        let hs: Vec<_> = workers
            .into_iter()
            .enumerate()
            .map(|(w, mut worker)| {
                let (s, ctxs, p, env) = (&s, &ctxs, &p, &env);
                scope.spawn(move || {
                    let mut steps = 0;
                    for e in (w..episodes).step_by(8) {
                        let ctx = &ctxs[e % ctxs.len()];
                        let seed = e as u64;
                        let mut local = SimEnv::new(s.clone(), env.clone());
                        let o1 = local.reset(ctx, seed).unwrap();
                        let o2 = worker.reset(ctx, seed).unwrap();
                        assert_eq!(o1, o2);
                        let mut state = AgentState::new(ctx.instruction.clone(), o1, 4);
                        let mut rng = ChaCha8Rng::seed_from_u64(combine(&[7, e as u64]));
                        loop {
                            let a = p.sample_action(&state, 1.0, &mut rng, MaskOptions::default()).action;
                            let x = local.step(&a).unwrap();
                            let y = worker.step(&a).unwrap();
                            assert_eq!(
                                (&x.observation, x.done, x.truncated, x.reward, x.true_reward),
                                (&y.observation, y.done, y.truncated, y.reward, y.true_reward),
                                "episode {e}"
                            );
                            steps += 1;
                            if x.done {
                                break;
                            }
                            state.advance(a, x.observation);
                        }
                    }
                    steps
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert!(checked >= episodes);
}

#[test]
fn failures_are_classified() {
    let s = suite();
    let dir = tempfile::tempdir().unwrap();
    let ctx = contexts(&s, 3)[1].clone();

    // a hanging step ends at the client timeout
    let hang = EnvConfig {
        clock: ClockMode::Real,
        faults: FaultModel { hang_prob: 1.0, hang_ms: 3000.0, ..FaultModel::default() },
        ..EnvConfig::default()
    };
    let mut spec = spec_with_env(&hang, &dir, &[]);
    spec.request_timeout_ms = 200;
    let mut w = HttpWorker::launch(&spec, 0).unwrap();
    w.reset(&ctx, 0).unwrap();
    let t0 = Instant::now();
    assert_eq!(w.step(&Action::PressBack).unwrap_err(), EnvFailure::Timeout);
    assert!(t0.elapsed() < Duration::from_millis(1500));

    // injected crash answered with 500, and the step is not replayed
    let crash = EnvConfig { faults: FaultModel { crash_prob: 1.0, seed: 1, ..FaultModel::default() }, ..EnvConfig::default() };
    let mut w = HttpWorker::launch(&spec_with_env(&crash, &dir, &[]), 1).unwrap();
    w.reset(&ctx, 0).unwrap();
    assert_eq!(w.step(&Action::PressBack).unwrap_err(), EnvFailure::ServerError(500));
    let rec = w.client().session().unwrap().unwrap();
    assert!(rec.crashed);
    assert_eq!(rec.step_count, 0);

    // the same crash as a process exit looks like a dead connection
    let mut w = HttpWorker::launch(&spec_with_env(&crash, &dir, &["--exit-on-crash"]), 2).unwrap();
    w.reset(&ctx, 0).unwrap();
    assert_eq!(w.step(&Action::PressBack).unwrap_err(), EnvFailure::ConnectionRefused);
    assert_eq!(w.client().health().unwrap_err(), EnvFailure::ConnectionRefused);

    // restart keeps the id and starts a new session space
    let pid = w.pid();
    w.restart().unwrap();
    assert_ne!(w.pid(), pid);
    assert!(w.label().starts_with("http-2@"));
    let h = w.client().health().unwrap();
    assert_eq!((h.worker_id, h.status), (2, WorkerStatus::Idle));
}

#[test]
fn partial_readiness_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let good = spec_with_env(&EnvConfig::default(), &dir, &[]);
    let bad = LaunchSpec { program: dir.path().join("no-such-binary"), ..good.clone() };
    let mut specs = vec![good; 4];
    specs[2] = bad.clone();
    let (workers, report) = spawn_workers(&specs).unwrap();
    assert_eq!(workers.len(), 3);
    assert_eq!(report.ready, vec![0, 1, 3]);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, 2);
    let ids: Vec<usize> = workers.iter().map(|w| w.id()).collect();
    assert_eq!(ids, vec![0, 1, 3]);
    let urls: std::collections::BTreeSet<String> = workers.iter().map(|w| w.endpoint().base_url).collect();
    assert_eq!(urls.len(), 3);
    assert!(spawn_workers(&[bad]).is_err());
}

#[test]
fn killing_one_worker_fails_only_its_session() {
    let s = suite();
    let dir = tempfile::tempdir().unwrap();
    let env = EnvConfig { clock: ClockMode::Real, ..EnvConfig::default() };
    let (workers, _) = spawn_worker_pool(16, &spec_with_env(&env, &dir, &[])).unwrap();
    let victim = 7;
    let pid = workers[victim].pid().unwrap();
    let pool = WorkerPool::new(workers.into_iter().map(|w| Box::new(w) as Box<dyn EnvWorker>).collect());

    let ctxs = contexts(&s, 5);
    let batch: Vec<(Context, usize)> = (0..16).map(|i| (ctxs[i * 7 % ctxs.len()].clone(), 1)).collect();
    let mut plan = RolloutPlan::new(batch, CollectMode::Async, 11);
    plan.decode = Decode::Sampled(1.0);
    plan.mask = MaskOptions { forbid_terminal: true };
    plan.step_cap = 15;
    let p = policy(&s, 2);

    let killer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(15));
        std::process::Command::new("kill").arg("-9").arg(pid.to_string()).status().unwrap();
    });
    let out = collect(&plan, &pool, &p, ClockMode::Real).unwrap();
    killer.join().unwrap();

    let failed: Vec<usize> = out.records.iter().filter(|r| r.failure.is_some()).map(|r| r.worker).collect();
    assert_eq!(failed, vec![victim]);

    // everyone else saw exactly what an undisturbed in-process run sees
    let local = WorkerPool::local(4, s.clone(), &EnvConfig::default());
    let reference = collect(&plan, &local, &p, ClockMode::Simulated).unwrap();
    for (a, b) in out.records.iter().zip(&reference.records) {
        if a.worker == victim {
            continue;
        }
        assert_eq!(a.status, b.status);
        let acts = |r: &mobirl_core::rollout::RolloutRecord| r.trajectory.steps.iter().map(|s| s.action.clone()).collect::<Vec<_>>();
        assert_eq!(acts(a), acts(b));
    }

    let again = collect(&plan, &pool, &p, ClockMode::Real).unwrap();
    assert_eq!(again.failed(), 0);
}
