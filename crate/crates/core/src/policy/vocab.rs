//! Dense token vocabulary and the action <-> token-sequence codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{Action, ActionKind, Observation, ScrollDirection, SCREEN_HEIGHT, SCREEN_WIDTH};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("token {0} out of range")]
    OutOfRange(u32),
    #[error("token sequence malformed: {0}")]
    Malformed(String),
    #[error("cannot encode action: {0}")]
    Unencodable(String),
}

/// Which head produces the argument token after a kind token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArgHead {
    Cell,
    Direction,
    Candidate,
    App,
}

pub fn arg_head(kind: ActionKind) -> Option<ArgHead> {
    match kind {
        ActionKind::Click | ActionKind::LongPress => Some(ArgHead::Cell),
        ActionKind::Type | ActionKind::Answer => Some(ArgHead::Candidate),
        ActionKind::Scroll => Some(ArgHead::Direction),
        ActionKind::OpenApp => Some(ArgHead::App),
        ActionKind::PressHome | ActionKind::PressBack | ActionKind::Finished => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub n_candidates: u32,
    pub apps: Vec<String>,
}

impl Vocab {
    pub fn new(apps: Vec<String>) -> Self {
        Vocab { grid_cols: 16, grid_rows: 8, n_candidates: 16, apps }
    }

    pub fn n_kinds(&self) -> u32 {
        ActionKind::ALL.len() as u32
    }

    pub fn n_cells(&self) -> u32 {
        self.grid_cols * self.grid_rows
    }

    pub fn n_dirs(&self) -> u32 {
        ScrollDirection::ALL.len() as u32
    }

    pub fn cell_offset(&self) -> u32 {
        self.n_kinds()
    }

    pub fn dir_offset(&self) -> u32 {
        self.cell_offset() + self.n_cells()
    }

    pub fn cand_offset(&self) -> u32 {
        self.dir_offset() + self.n_dirs()
    }

    pub fn app_offset(&self) -> u32 {
        self.cand_offset() + self.n_candidates
    }

    pub fn size(&self) -> u32 {
        self.app_offset() + self.apps.len() as u32
    }

    pub fn head_size(&self, head: ArgHead) -> usize {
        (match head {
            ArgHead::Cell => self.n_cells(),
            ArgHead::Direction => self.n_dirs(),
            ArgHead::Candidate => self.n_candidates,
            ArgHead::App => self.apps.len() as u32,
        }) as usize
    }

    pub fn head_offset(&self, head: ArgHead) -> u32 {
        match head {
            ArgHead::Cell => self.cell_offset(),
            ArgHead::Direction => self.dir_offset(),
            ArgHead::Candidate => self.cand_offset(),
            ArgHead::App => self.app_offset(),
        }
    }

    pub fn cell_w(&self) -> i32 {
        SCREEN_WIDTH / self.grid_cols as i32
    }

    pub fn cell_h(&self) -> i32 {
        SCREEN_HEIGHT / self.grid_rows as i32
    }

    /// Center pixel of a grid cell.
    pub fn cell_center(&self, cell: u32) -> (i32, i32) {
        let col = (cell % self.grid_cols) as i32;
        let row = (cell / self.grid_cols) as i32;
        (col * self.cell_w() + self.cell_w() / 2, row * self.cell_h() + self.cell_h() / 2)
    }

    pub fn cell_of(&self, x: i32, y: i32) -> u32 {
        let col = (x / self.cell_w()).clamp(0, self.grid_cols as i32 - 1) as u32;
        let row = (y / self.cell_h()).clamp(0, self.grid_rows as i32 - 1) as u32;
        row * self.grid_cols + col
    }

    /// Tokens to action. Candidate tokens index `obs.candidates`.
    pub fn decode(&self, tokens: &[u32], obs: &Observation) -> Result<Action, CodecError> {
        let (&k, rest) = tokens.split_first().ok_or_else(|| CodecError::Malformed("empty".into()))?;
        if k >= self.n_kinds() {
            return Err(CodecError::Malformed(format!("first token {k} is not an action kind")));
        }
        let kind = ActionKind::ALL[k as usize];
        let head = arg_head(kind);
        let expected = usize::from(head.is_some());
        if rest.len() != expected {
            return Err(CodecError::Malformed(format!("{kind:?} takes {expected} argument token(s), got {}", rest.len())));
        }
        let arg = |h: ArgHead| -> Result<u32, CodecError> {
            let t = rest[0];
            let off = self.head_offset(h);
            if t < off || t >= off + self.head_size(h) as u32 {
                return Err(CodecError::OutOfRange(t));
            }
            Ok(t - off)
        };
        let cand = |i: u32| -> Result<String, CodecError> {
            obs.candidates
                .as_ref()
                .and_then(|c| c.get(i as usize))
                .cloned()
                .ok_or(CodecError::OutOfRange(i + self.cand_offset()))
        };
        Ok(match kind {
            ActionKind::Click => {
                let (x, y) = self.cell_center(arg(ArgHead::Cell)?);
                Action::Click { x, y }
            }
            ActionKind::LongPress => {
                let (x, y) = self.cell_center(arg(ArgHead::Cell)?);
                Action::LongPress { x, y }
            }
            ActionKind::Type => Action::Type { content: cand(arg(ArgHead::Candidate)?)? },
            ActionKind::Answer => Action::Answer { content: cand(arg(ArgHead::Candidate)?)? },
            ActionKind::Scroll => Action::Scroll { direction: ScrollDirection::ALL[arg(ArgHead::Direction)? as usize] },
            ActionKind::OpenApp => Action::OpenApp { app: self.apps[arg(ArgHead::App)? as usize].clone() },
            ActionKind::PressHome => Action::PressHome,
            ActionKind::PressBack => Action::PressBack,
            ActionKind::Finished => Action::Finished { content: String::new() },
        })
    }

    pub fn encode(&self, action: &Action, obs: &Observation) -> Result<Vec<u32>, CodecError> {
        let k = action.kind().index() as u32;
        let cand = |content: &str| -> Result<u32, CodecError> {
            obs.candidates
                .as_ref()
                .and_then(|c| c.iter().position(|s| s == content))
                .filter(|&i| (i as u32) < self.n_candidates)
                .map(|i| self.cand_offset() + i as u32)
                .ok_or_else(|| CodecError::Unencodable(format!("`{content}` is not a candidate")))
        };
        Ok(match action {
            Action::Click { x, y } | Action::LongPress { x, y } => vec![k, self.cell_offset() + self.cell_of(*x, *y)],
            Action::Type { content } | Action::Answer { content } => vec![k, cand(content)?],
            Action::Scroll { direction } => {
                let d = ScrollDirection::ALL.iter().position(|x| x == direction).expect("listed") as u32;
                vec![k, self.dir_offset() + d]
            }
            Action::OpenApp { app } => {
                let i = self
                    .apps
                    .iter()
                    .position(|a| a == app)
                    .ok_or_else(|| CodecError::Unencodable(format!("unknown app {app}")))?;
                vec![k, self.app_offset() + i as u32]
            }
            Action::PressHome | Action::PressBack | Action::Finished { .. } => vec![k],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs() -> Observation {
        Observation {
            screen_id: "a/main".into(),
            widgets: vec![],
            step_index: 0,
            candidates: Some(vec!["x".into(), "y".into()]),
        }
    }

    #[test]
    fn dense_layout() {
        let v = Vocab::new(vec!["A".into(), "B".into()]);
        assert_eq!(v.cell_offset(), 9);
        assert_eq!(v.dir_offset(), 137);
        assert_eq!(v.cand_offset(), 141);
        assert_eq!(v.app_offset(), 157);
        assert_eq!(v.size(), 159);
    }

    #[test]
    fn roundtrip_all_tokens() {
        let v = Vocab::new(vec!["A".into(), "B".into()]);
        let o = obs();
        for k in 0..9u32 {
            let kind = ActionKind::ALL[k as usize];
            let seqs: Vec<Vec<u32>> = match arg_head(kind) {
                None => vec![vec![k]],
                Some(h) => {
                    let n = if h == ArgHead::Candidate { 2 } else { v.head_size(h) as u32 };
                    (0..n).map(|i| vec![k, v.head_offset(h) + i]).collect()
                }
            };
            for s in seqs {
                let a = v.decode(&s, &o).unwrap();
                a.validate().unwrap();
                assert_eq!(v.encode(&a, &o).unwrap(), s);
            }
        }
    }

    #[test]
    fn malformed_sequences() {
        let v = Vocab::new(vec![]);
        assert!(v.decode(&[], &obs()).is_err());
        assert!(v.decode(&[0], &obs()).is_err());
        assert!(v.decode(&[4, 9], &obs()).is_err());
        assert!(v.decode(&[0, 137], &obs()).is_err());
        assert!(v.decode(&[2, 141 + 5], &obs()).is_err());
    }
}
