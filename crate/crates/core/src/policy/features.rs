//! State featurization: a fixed-length state vector plus per-option feature
//! rows for the pointer-style cell and candidate heads.

use serde::{Deserialize, Serialize};

use crate::cmdp::{Action, ActionKind, AgentState, WidgetKind, DEFAULT_STEP_CAP};
use crate::hashing::fnv1a_str;
use crate::scalar::Scalar;
use crate::sim::env::SCREEN_KINDS;

use super::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub screen_id_dims: usize,
    pub widget_dims: usize,
    pub instruction_dims: usize,
    pub history_dims: usize,
    pub text_buckets: usize,
    /// Normalizer for the step-index feature.
    pub step_scale: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            screen_id_dims: 16,
            widget_dims: 64,
            instruction_dims: 32,
            history_dims: 32,
            text_buckets: 16,
            step_scale: DEFAULT_STEP_CAP,
        }
    }
}

impl FeatureConfig {
    pub fn state_dim(&self) -> usize {
        SCREEN_KINDS.len()
            + self.screen_id_dims
            + self.widget_dims
            + WidgetKind::ALL.len()
            + 1
            + self.instruction_dims
            + 1
            + ActionKind::ALL.len()
            + 1
            + self.history_dims
    }

    /// kind one-hot (5) + empty + mentioned + focused + text bucket
    pub fn cell_dim(&self) -> usize {
        WidgetKind::ALL.len() + 3 + self.text_buckets
    }

    /// in instruction, mention rank (4), typed before, on screen, in a label, in focused field
    pub fn cand_dim(&self) -> usize {
        9
    }
}

/// Everything the network needs about one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<F> {
    pub x: Vec<F>,
    /// n_cells rows of `cell_dim`, flattened
    pub cell: Vec<F>,
    /// n_candidates rows of `cand_dim`, flattened
    pub cand: Vec<F>,
    pub n_live_candidates: usize,
    pub has_focused_field: bool,
}

/// Quoted phrases of the instruction ('like this'), in order.
pub fn quoted_phrases(instruction: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = instruction;
    while let Some(a) = rest.find('\'') {
        let after = &rest[a + 1..];
        match after.find('\'') {
            Some(b) => {
                out.push(&after[..b]);
                rest = &after[b + 1..];
            }
            None => break,
        }
    }
    out
}

fn bucket(s: &str, n: usize) -> usize {
    (fnv1a_str(s) % n as u64) as usize
}

fn label_text(text: &str) -> &str {
    text.split(" [").next().unwrap_or(text)
}

fn action_token(a: &Action, vocab: &Vocab) -> String {
    match a {
        Action::Click { x, y } => format!("click:{}", vocab.cell_of(*x, *y)),
        Action::LongPress { x, y } => format!("long:{}", vocab.cell_of(*x, *y)),
        Action::Type { content } => format!("type:{content}"),
        Action::Scroll { direction } => format!("scroll:{direction:?}"),
        Action::OpenApp { app } => format!("open:{app}"),
        other => format!("{:?}", other.kind()),
    }
}

pub fn featurize<F: Scalar>(cfg: &FeatureConfig, vocab: &Vocab, state: &AgentState) -> Prepared<F> {
    let obs = &state.observation;
    let one = F::one();
    let mut x = vec![F::zero(); cfg.state_dim()];
    let mut off = 0;

    if let Some(i) = SCREEN_KINDS.iter().position(|k| *k == obs.screen_kind()) {
        x[off + i] = one;
    }
    off += SCREEN_KINDS.len();

    x[off + bucket(&obs.screen_id, cfg.screen_id_dims)] = one;
    off += cfg.screen_id_dims;

    for w in &obs.widgets {
        let (cx, cy) = w.bounds.center();
        let key = format!("{:?}:{}@{}", w.kind, label_text(&w.text), vocab.cell_of(cx, cy));
        x[off + bucket(&key, cfg.widget_dims)] = one;
    }
    off += cfg.widget_dims;

    for w in &obs.widgets {
        x[off + w.kind.index()] += F::lit(0.125);
    }
    off += WidgetKind::ALL.len();

    let focused = obs.focused_field().is_some();
    if focused {
        x[off] = one;
    }
    off += 1;

    for word in state.instruction.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        x[off + bucket(&word.to_lowercase(), cfg.instruction_dims)] = one;
    }
    off += cfg.instruction_dims;

    x[off] = F::lit(f64::from(obs.step_index) / cfg.step_scale.max(1) as f64);
    off += 1;

    match state.last_action() {
        Some(a) => x[off + a.kind().index()] = one,
        None => x[off + ActionKind::ALL.len()] = one,
    }
    off += ActionKind::ALL.len() + 1;

    for h in &state.history {
        x[off + bucket(&action_token(&h.action, vocab), cfg.history_dims)] = one;
    }
    off += cfg.history_dims;
    debug_assert_eq!(off, x.len());

    let phrases = quoted_phrases(&state.instruction);

    let cd = cfg.cell_dim();
    let mut cell = vec![F::zero(); vocab.n_cells() as usize * cd];
    for c in 0..vocab.n_cells() {
        let row = &mut cell[c as usize * cd..(c as usize + 1) * cd];
        let (cx, cy) = vocab.cell_center(c);
        match obs.hit_test(cx, cy) {
            None => row[WidgetKind::ALL.len()] = one,
            Some(w) => {
                row[w.kind.index()] = one;
                let name = label_text(&w.text);
                if !name.is_empty() && phrases.contains(&name) {
                    row[WidgetKind::ALL.len() + 1] = one;
                }
                if w.focused {
                    row[WidgetKind::ALL.len() + 2] = one;
                }
                row[WidgetKind::ALL.len() + 3 + bucket(name, cfg.text_buckets)] = one;
            }
        }
    }

    let kd = cfg.cand_dim();
    let n_cand = vocab.n_candidates as usize;
    let mut cand = vec![F::zero(); n_cand * kd];
    let cands = obs.candidates.as_deref().unwrap_or(&[]);
    let live = cands.len().min(n_cand);
    let focused_text = obs.focused_field().map(|w| w.text.as_str());
    for (j, c) in cands.iter().take(live).enumerate() {
        let row = &mut cand[j * kd..(j + 1) * kd];
        if let Some(rank) = phrases.iter().position(|p| p == c) {
            row[0] = one;
            row[1 + rank.min(3)] = one;
        }
        if state.history.iter().any(|h| matches!(&h.action, Action::Type { content } if content == c)) {
            row[5] = one;
        }
        if obs.widgets.iter().any(|w| w.text.contains(c.as_str())) {
            row[6] = one;
        }
        if obs.widgets.iter().any(|w| w.kind == WidgetKind::Label && w.text.split(": ").nth(1) == Some(c.as_str())) {
            row[7] = one;
        }
        if focused_text == Some(c.as_str()) {
            row[8] = one;
        }
    }

    Prepared { x, cell, cand, n_live_candidates: live, has_focused_field: focused }
}
