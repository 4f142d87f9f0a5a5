//! Clock drivers for the scheduler.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError};

use super::{execute, CollectError, CollectOutput, Cmd, Reply, RolloutPlan, RolloutRecord, Scheduler, ThroughputReport, WorkerPool};
use crate::cmdp::RolloutStatus;
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

struct Event {
    at: f64,
    seq: u64,
    worker: usize,
    reply: Reply,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.at == o.at && self.seq == o.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Event {
    // min-heap on (at, seq)
    fn cmp(&self, o: &Self) -> Ordering {
        o.at.total_cmp(&self.at).then(o.seq.cmp(&self.seq))
    }
}

#[allow(clippy::too_many_arguments)]
fn report(plan: &RolloutPlan, records: &[RolloutRecord], pool_size: usize, wall: f64, busy: &[f64], inference: f64, steps: usize, batches: usize) -> ThroughputReport {
    let count = |s: RolloutStatus| records.iter().filter(|r| r.status == s).count();
    ThroughputReport {
        mode: plan.mode.label().to_string(),
        pool_size,
        wall_ms: wall,
        env_ms: busy.iter().sum(),
        inference_ms: inference,
        idle_ms: busy.iter().map(|b| (wall - b).max(0.0)).collect(),
        steps,
        steps_per_sec: if wall > 0.0 { steps as f64 / (wall / 1000.0) } else { 0.0 },
        completed: count(RolloutStatus::Complete),
        truncated: count(RolloutStatus::Truncated),
        failed: count(RolloutStatus::Failed),
        inference_batches: batches,
    }
}

/// Discrete-event run: commands execute immediately and their replies are
/// delivered at `now + reported latency`; inference batches occupy a single
/// server for their modeled cost.
pub(crate) fn run_simulated<F: Scalar>(plan: &RolloutPlan, pool: &WorkerPool, policy: &PolicyParams<F>) -> Result<CollectOutput, CollectError> {
    let n = pool.size();
    let mut sched = Scheduler::new(plan, policy, n);
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut busy = vec![0.0; n];
    let mut now = 0.0f64;
    let mut server_free = 0.0f64;
    let mut inference = 0.0;

    let mut dispatch = |cmds: Vec<(usize, Cmd)>, at: f64, heap: &mut BinaryHeap<Event>, busy: &mut [f64]| {
        for (w, cmd) in cmds {
            let reply = execute(pool.worker(w).as_mut(), &cmd);
            let lat = reply.latency_ms();
            busy[w] += lat;
            heap.push(Event { at: at + lat, seq, worker: w, reply });
            seq += 1;
        }
    };

    let first = sched.start();
    dispatch(first, now, &mut heap, &mut busy);
    while !sched.all_done() {
        if let Some(e) = sched.pool_down() {
            return Err(e);
        }
        if now >= server_free && sched.ready(now) {
            let batch = sched.take_batch();
            let cost = plan.inference_cost.per_batch_ms + plan.inference_cost.per_item_ms * batch.len() as f64;
            let cmds = sched.infer(&batch);
            inference += cost;
            server_free = now + cost;
            dispatch(cmds, server_free, &mut heap, &mut busy);
            continue;
        }
        let t_event = heap.peek().map_or(f64::INFINITY, |e| e.at);
        let t_wake = if !sched.has_queued() {
            f64::INFINITY
        } else if now < server_free {
            server_free
        } else {
            sched.deadline().filter(|d| *d > now).unwrap_or(f64::INFINITY)
        };
        if t_event.is_infinite() && t_wake.is_infinite() {
            return Err(sched.pool_down().unwrap_or_else(|| CollectError::PoolDown("scheduler stalled".into())));
        }
        if t_event <= t_wake {
            let e = heap.pop().expect("finite event time");
            now = now.max(e.at);
            let cmds = sched.on_reply(e.worker, e.reply, now);
            dispatch(cmds, now, &mut heap, &mut busy);
        } else {
            now = t_wake;
        }
    }
    let (steps, batches) = (sched.steps, sched.batches);
    let records = sched.into_records();
    let report = report(plan, &records, n, now.max(server_free), &busy, inference, steps, batches);
    Ok(CollectOutput { records, report })
}

/// Wall-clock run with one thread per worker.
pub(crate) fn run_real<F: Scalar>(plan: &RolloutPlan, pool: &WorkerPool, policy: &PolicyParams<F>) -> Result<CollectOutput, CollectError> {
    let n = pool.size();
    let start = Instant::now();
    let ms = |t: Instant| t.duration_since(start).as_secs_f64() * 1000.0;
    let mut sched = Scheduler::new(plan, policy, n);
    let mut busy = vec![0.0; n];
    let mut inference = 0.0;
    let (reply_tx, reply_rx) = unbounded::<(usize, Reply, f64)>();

    let result = std::thread::scope(|scope| {
        let mut senders = Vec::with_capacity(n);
        for w in 0..n {
            let (tx, rx) = unbounded::<Cmd>();
            senders.push(tx);
            let reply_tx = reply_tx.clone();
            scope.spawn(move || {
                for cmd in rx {
                    let t0 = Instant::now();
                    let reply = execute(pool.worker(w).as_mut(), &cmd);
                    let took = t0.elapsed().as_secs_f64() * 1000.0;
                    if reply_tx.send((w, reply, took)).is_err() {
                        break;
                    }
                }
            });
        }
        let send = |cmds: Vec<(usize, Cmd)>| {
            for (w, c) in cmds {
                senders[w].send(c).expect("worker thread alive while scheduling");
            }
        };
        send(sched.start());
        let out = loop {
            if sched.all_done() {
                break Ok(());
            }
            if let Some(e) = sched.pool_down() {
                break Err(e);
            }
            let now = ms(Instant::now());
            if sched.ready(now) {
                let t0 = Instant::now();
                let batch = sched.take_batch();
                let cmds = sched.infer(&batch);
                inference += t0.elapsed().as_secs_f64() * 1000.0;
                send(cmds);
                continue;
            }
            let wait = match sched.deadline() {
                Some(d) => Duration::from_secs_f64(((d - now).max(0.0)) / 1000.0),
                None => Duration::from_secs(3600),
            };
            match reply_rx.recv_timeout(wait) {
                Ok((w, reply, took)) => {
                    busy[w] += took;
                    let now = ms(Instant::now());
                    let cmds = sched.on_reply(w, reply, now);
                    send(cmds);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break Err(CollectError::PoolDown("worker threads exited".into())),
            }
        };
        drop(senders);
        out
    });
    result?;
    let wall = ms(Instant::now());
    let (steps, batches) = (sched.steps, sched.batches);
    let records = sched.into_records();
    let report = report(plan, &records, n, wall, &busy, inference, steps, batches);
    Ok(CollectOutput { records, report })
}
