//! One-hidden-layer tanh network with a kind head and per-kind argument
//! heads. Cell and candidate heads add a state-conditioned pointer term over
//! per-option features. Gradients are hand-derived.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{Action, ActionKind, AgentState};
use crate::scalar::Scalar;

use super::features::{featurize, FeatureConfig, Prepared};
use super::vocab::{arg_head, ArgHead, CodecError, Vocab};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("token {token} at position {position} is masked in this state")]
    Masked { position: usize, token: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub features: FeatureConfig,
    pub vocab: Vocab,
    pub init_seed: u64,
    pub history_window: usize,
}

impl PolicyConfig {
    pub fn new(apps: Vec<String>) -> Self {
        PolicyConfig {
            hidden: 64,
            features: FeatureConfig::default(),
            vocab: Vocab::new(apps),
            init_seed: 0,
            history_window: crate::cmdp::DEFAULT_HISTORY_WINDOW,
        }
    }
}

/// Argument heads, one per kind that takes an argument.
pub const HEAD_KINDS: [ActionKind; 6] = [
    ActionKind::Click,
    ActionKind::LongPress,
    ActionKind::Type,
    ActionKind::Answer,
    ActionKind::Scroll,
    ActionKind::OpenApp,
];

pub fn head_index(kind: ActionKind) -> Option<usize> {
    HEAD_KINDS.iter().position(|k| *k == kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadLayout {
    kind: ArgHead,
    n: usize,
    /// pointer feature width; 0 for plain heads
    p: usize,
    w: usize,
    b: usize,
    qw: usize,
    qb: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    d: usize,
    h: usize,
    w1: usize,
    b1: usize,
    kw: usize,
    kb: usize,
    heads: Vec<HeadLayout>,
    total: usize,
}

impl Layout {
    fn of(cfg: &PolicyConfig) -> Layout {
        let d = cfg.features.state_dim();
        let h = cfg.hidden;
        let nk = ActionKind::ALL.len();
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let w1 = take(h * d);
        let b1 = take(h);
        let kw = take(nk * h);
        let kb = take(nk);
        let mut heads = Vec::new();
        for kind in HEAD_KINDS {
            let ah = arg_head(kind).expect("head kinds take an argument");
            let n = cfg.vocab.head_size(ah);
            let p = match ah {
                ArgHead::Cell => cfg.features.cell_dim(),
                ArgHead::Candidate => cfg.features.cand_dim(),
                _ => 0,
            };
            let w = take(n * h);
            let b = take(n);
            let qw = take(p * h);
            let qb = take(p);
            heads.push(HeadLayout { kind: ah, n, p, w, b, qw, qb });
        }
        Layout { d, h, w1, b1, kw, kb, heads, total: off }
    }
}

/// Masking switches that are not derived from the state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Disallow Finished and Answer (fixed-length profiling episodes).
    pub forbid_terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<F> {
    pub config: PolicyConfig,
    pub theta: Vec<F>,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub token_ids: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    pub action: Action,
}

/// Forward pass over one token sequence, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TokenPass<F> {
    h: Vec<F>,
    kind_probs: Vec<F>,
    kind: usize,
    arg: Option<(usize, usize, Vec<F>)>,
    pub logprobs: Vec<F>,
}

fn masked_log_softmax<F: Scalar>(logits: &[F], mask: &[bool], inv_t: F) -> Vec<F> {
    let mut m = F::neg_infinity();
    for (z, &ok) in logits.iter().zip(mask) {
        if ok && *z * inv_t > m {
            m = *z * inv_t;
        }
    }
    let mut s = F::zero();
    for (z, &ok) in logits.iter().zip(mask) {
        if ok {
            s += (*z * inv_t - m).exp();
        }
    }
    let ls = s.ln();
    logits
        .iter()
        .zip(mask)
        .map(|(z, &ok)| if ok { *z * inv_t - m - ls } else { F::neg_infinity() })
        .collect()
}

impl<F: Scalar> PolicyParams<F> {
    /// Hidden weights uniform in +-1/sqrt(fan_in); every output weight zero,
    /// so the initial policy is uniform over unmasked tokens.
    pub fn init(config: PolicyConfig) -> Self {
        let layout = Layout::of(&config);
        let mut theta = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let bound = 1.0 / (layout.d as f64).sqrt();
        for v in &mut theta[layout.w1..layout.w1 + layout.h * layout.d] {
            *v = F::lit(rng.gen_range(-bound..bound));
        }
        PolicyParams { config, theta, version: 0 }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn prepare(&self, state: &AgentState) -> Prepared<F> {
        featurize(&self.config.features, &self.config.vocab, state)
    }

    fn layout(&self) -> Layout {
        let l = Layout::of(&self.config);
        assert_eq!(l.total, self.theta.len(), "parameter vector does not match the config");
        l
    }

    fn hidden(&self, l: &Layout, x: &[F]) -> Vec<F> {
        let t = &self.theta;
        (0..l.h)
            .map(|i| {
                let row = &t[l.w1 + i * l.d..l.w1 + (i + 1) * l.d];
                let mut a = t[l.b1 + i];
                for (w, xv) in row.iter().zip(x) {
                    if *xv != F::zero() {
                        a += *w * *xv;
                    }
                }
                a.tanh()
            })
            .collect()
    }

    fn linear(&self, w: usize, b: usize, n: usize, hdim: usize, h: &[F]) -> Vec<F> {
        let t = &self.theta;
        (0..n)
            .map(|j| {
                let row = &t[w + j * hdim..w + (j + 1) * hdim];
                t[b + j] + row.iter().zip(h).map(|(a, c)| *a * *c).sum::<F>()
            })
            .collect()
    }

    fn kind_logits(&self, l: &Layout, h: &[F]) -> Vec<F> {
        self.linear(l.kw, l.kb, ActionKind::ALL.len(), l.h, h)
    }

    fn head_logits(&self, l: &Layout, hl: &HeadLayout, h: &[F], prep: &Prepared<F>) -> Vec<F> {
        let mut z = self.linear(hl.w, hl.b, hl.n, l.h, h);
        if hl.p > 0 {
            let q = self.linear(hl.qw, hl.qb, hl.p, l.h, h);
            let feats = match hl.kind {
                ArgHead::Cell => &prep.cell,
                _ => &prep.cand,
            };
            for (j, zj) in z.iter_mut().enumerate() {
                let f = &feats[j * hl.p..(j + 1) * hl.p];
                *zj += q.iter().zip(f).map(|(a, b)| *a * *b).sum::<F>();
            }
        }
        z
    }

    pub fn kind_mask(&self, prep: &Prepared<F>, opts: MaskOptions) -> Vec<bool> {
        ActionKind::ALL
            .iter()
            .map(|k| match k {
                ActionKind::Type => prep.has_focused_field && prep.n_live_candidates > 0,
                ActionKind::Answer => prep.n_live_candidates > 0 && !opts.forbid_terminal,
                ActionKind::Finished => !opts.forbid_terminal,
                ActionKind::OpenApp => !self.config.vocab.apps.is_empty(),
                _ => true,
            })
            .collect()
    }

    fn head_mask(&self, hl: &HeadLayout, prep: &Prepared<F>) -> Vec<bool> {
        (0..hl.n)
            .map(|j| hl.kind != ArgHead::Candidate || j < prep.n_live_candidates)
            .collect()
    }

    /// Kind-position log-probabilities (raw parameters, temperature 1).
    pub fn kind_logprobs(&self, prep: &Prepared<F>, opts: MaskOptions) -> Vec<F> {
        let l = self.layout();
        let h = self.hidden(&l, &prep.x);
        masked_log_softmax(&self.kind_logits(&l, &h), &self.kind_mask(prep, opts), F::one())
    }

    /// Argument-position log-probabilities for the head of `kind`.
    pub fn arg_logprobs(&self, prep: &Prepared<F>, kind: ActionKind) -> Option<Vec<F>> {
        let l = self.layout();
        let hi = head_index(kind)?;
        let hl = l.heads[hi];
        let h = self.hidden(&l, &prep.x);
        Some(masked_log_softmax(&self.head_logits(&l, &hl, &h, prep), &self.head_mask(&hl, prep), F::one()))
    }

    fn draw(logp: &[F], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, lp) in logp.iter().enumerate() {
            if lp.is_finite() {
                acc += lp.as_f64().exp();
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    fn argmax(logp: &[F]) -> usize {
        let mut best = 0;
        for (i, lp) in logp.iter().enumerate() {
            if *lp > logp[best] {
                best = i;
            }
        }
        best
    }

    fn choose(
        &self,
        state: &AgentState,
        temperature: Option<f64>,
        rng: &mut impl Rng,
        opts: MaskOptions,
    ) -> Sampled {
        let l = self.layout();
        let prep = self.prepare(state);
        let h = self.hidden(&l, &prep.x);
        let inv_t = F::lit(1.0 / temperature.unwrap_or(1.0));
        let klp = masked_log_softmax(&self.kind_logits(&l, &h), &self.kind_mask(&prep, opts), inv_t);
        let k = match temperature {
            Some(_) => Self::draw(&klp, rng),
            None => Self::argmax(&klp),
        };
        let kind = ActionKind::ALL[k];
        let mut tokens = vec![k as u32];
        let mut lps = vec![klp[k].as_f64()];
        if let Some(hi) = head_index(kind) {
            let hl = l.heads[hi];
            let alp = masked_log_softmax(&self.head_logits(&l, &hl, &h, &prep), &self.head_mask(&hl, &prep), inv_t);
            let j = match temperature {
                Some(_) => Self::draw(&alp, rng),
                None => Self::argmax(&alp),
            };
            tokens.push(self.config.vocab.head_offset(hl.kind) + j as u32);
            lps.push(alp[j].as_f64());
        }
        let action = self
            .config
            .vocab
            .decode(&tokens, &state.observation)
            .expect("masking only admits decodable sequences");
        Sampled { token_ids: tokens, token_logprobs: lps, action }
    }

    /// Samples at `temperature` (> 0); recorded log-probs are of the masked,
    /// temperature-scaled distribution.
    pub fn sample_action(&self, state: &AgentState, temperature: f64, rng: &mut impl Rng, opts: MaskOptions) -> Sampled {
        assert!(temperature > 0.0, "temperature must be positive");
        self.choose(state, Some(temperature), rng, opts)
    }

    /// Argmax decoding; log-probs are at temperature 1.
    pub fn greedy_action(&self, state: &AgentState, opts: MaskOptions) -> Sampled {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.choose(state, None, &mut rng, opts)
    }

    pub fn forward_tokens(&self, prep: &Prepared<F>, tokens: &[u32], opts: MaskOptions) -> Result<TokenPass<F>, MaskError> {
        let l = self.layout();
        let vocab = &self.config.vocab;
        let k = *tokens.first().ok_or_else(|| CodecError::Malformed("empty".into()))? as usize;
        if k >= ActionKind::ALL.len() {
            return Err(CodecError::Malformed(format!("first token {k} is not a kind")).into());
        }
        let h = self.hidden(&l, &prep.x);
        let klp = masked_log_softmax(&self.kind_logits(&l, &h), &self.kind_mask(prep, opts), F::one());
        if !klp[k].is_finite() {
            return Err(MaskError::Masked { position: 0, token: k as u32 });
        }
        let kind = ActionKind::ALL[k];
        let mut logprobs = vec![klp[k]];
        let arg = match head_index(kind) {
            None => {
                if tokens.len() != 1 {
                    return Err(CodecError::Malformed(format!("{kind:?} takes no argument")).into());
                }
                None
            }
            Some(hi) => {
                let hl = l.heads[hi];
                if tokens.len() != 2 {
                    return Err(CodecError::Malformed(format!("{kind:?} takes one argument")).into());
                }
                let off = vocab.head_offset(hl.kind);
                let t = tokens[1];
                if t < off || (t - off) as usize >= hl.n {
                    return Err(CodecError::OutOfRange(t).into());
                }
                let j = (t - off) as usize;
                let alp = masked_log_softmax(&self.head_logits(&l, &hl, &h, prep), &self.head_mask(&hl, prep), F::one());
                if !alp[j].is_finite() {
                    return Err(MaskError::Masked { position: 1, token: t });
                }
                logprobs.push(alp[j]);
                Some((hi, j, alp.iter().map(|v| v.exp()).collect()))
            }
        };
        Ok(TokenPass { kind_probs: klp.iter().map(|v| v.exp()).collect(), h, kind: k, arg, logprobs })
    }

    /// Adds d(sum_i dlogp[i] * logprob[i]) / d(theta) into `grad`.
    pub fn backward(&self, prep: &Prepared<F>, pass: &TokenPass<F>, dlogp: &[F], grad: &mut [F]) {
        let l = self.layout();
        let t = &self.theta;
        let mut dh = vec![F::zero(); l.h];
        let h = &pass.h;

        // kind head
        let w0 = dlogp[0];
        if w0 != F::zero() {
            for (j, p) in pass.kind_probs.iter().enumerate() {
                let dz = w0 * (if j == pass.kind { F::one() } else { F::zero() } - *p);
                if dz == F::zero() {
                    continue;
                }
                grad[l.kb + j] += dz;
                let row = l.kw + j * l.h;
                for i in 0..l.h {
                    grad[row + i] += dz * h[i];
                    dh[i] += dz * t[row + i];
                }
            }
        }

        if let Some((hi, sel, probs)) = &pass.arg {
            let w1 = dlogp[1];
            if w1 != F::zero() {
                let hl = l.heads[*hi];
                let dz: Vec<F> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| w1 * (if j == *sel { F::one() } else { F::zero() } - *p))
                    .collect();
                for (j, d) in dz.iter().enumerate() {
                    if *d == F::zero() {
                        continue;
                    }
                    grad[hl.b + j] += *d;
                    let row = hl.w + j * l.h;
                    for i in 0..l.h {
                        grad[row + i] += *d * h[i];
                        dh[i] += *d * t[row + i];
                    }
                }
                if hl.p > 0 {
                    let feats = match hl.kind {
                        ArgHead::Cell => &prep.cell,
                        _ => &prep.cand,
                    };
                    let mut dq = vec![F::zero(); hl.p];
                    for (j, d) in dz.iter().enumerate() {
                        if *d == F::zero() {
                            continue;
                        }
                        for (k, f) in feats[j * hl.p..(j + 1) * hl.p].iter().enumerate() {
                            dq[k] += *d * *f;
                        }
                    }
                    for (k, d) in dq.iter().enumerate() {
                        if *d == F::zero() {
                            continue;
                        }
                        grad[hl.qb + k] += *d;
                        let row = hl.qw + k * l.h;
                        for i in 0..l.h {
                            grad[row + i] += *d * h[i];
                            dh[i] += *d * t[row + i];
                        }
                    }
                }
            }
        }

        let x = &prep.x;
        for i in 0..l.h {
            let da = dh[i] * (F::one() - h[i] * h[i]);
            if da == F::zero() {
                continue;
            }
            grad[l.b1 + i] += da;
            let row = l.w1 + i * l.d;
            for (c, xv) in x.iter().enumerate() {
                if *xv != F::zero() {
                    grad[row + c] += da * *xv;
                }
            }
        }
    }

    /// Per-token log-probabilities and the gradient of their sum.
    pub fn logprob_and_grad(&self, state: &AgentState, tokens: &[u32], opts: MaskOptions) -> Result<(Vec<F>, Vec<F>), MaskError> {
        let prep = self.prepare(state);
        let pass = self.forward_tokens(&prep, tokens, opts)?;
        let mut grad = vec![F::zero(); self.theta.len()];
        let ones = vec![F::one(); pass.logprobs.len()];
        self.backward(&prep, &pass, &ones, &mut grad);
        Ok((pass.logprobs, grad))
    }

    pub fn token_logprobs(&self, state: &AgentState, tokens: &[u32], opts: MaskOptions) -> Result<Vec<F>, MaskError> {
        Ok(self.forward_tokens(&self.prepare(state), tokens, opts)?.logprobs)
    }
}

/// Per-token KL penalty k = r - ln r - 1 with r = pi_ref / pi_theta.
pub fn kl_token<F: Scalar>(
    params: &PolicyParams<F>,
    reference: &PolicyParams<F>,
    state: &AgentState,
    tokens: &[u32],
    opts: MaskOptions,
) -> Result<Vec<F>, MaskError> {
    let lp = params.token_logprobs(state, tokens, opts)?;
    let lr = reference.token_logprobs(state, tokens, opts)?;
    Ok(lp.iter().zip(&lr).map(|(a, b)| kl_estimate(*a, *b)).collect())
}

/// k(l_theta, l_ref) = exp(l_ref - l_theta) - (l_ref - l_theta) - 1
pub fn kl_estimate<F: Scalar>(logp: F, logp_ref: F) -> F {
    let d = logp_ref - logp;
    d.exp() - d - F::one()
}

/// d k / d l_theta = 1 - exp(l_ref - l_theta)
pub fn kl_estimate_dlogp<F: Scalar>(logp: F, logp_ref: F) -> F {
    F::one() - (logp_ref - logp).exp()
}
