//! Prediction networks: LSTM, windowed Transformer and Conformer, and the
//! reduced n-gram mixers (N-Avg, N-Concat, stateless).

mod attention;
mod lstm;
mod ngram;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub use ngram::{n_avg_mix, n_concat_mix};

use attention::AttentionBody;
use lstm::LstmCell;
use ngram::NgramBody;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PnKind {
    Lstm,
    Transformer,
    Conformer,
    NAvg,
    NConcat,
    /// N-Concat restricted to the single most recent token.
    Stateless,
}

impl PnKind {
    pub const ALL: [PnKind; 6] = [
        PnKind::Lstm,
        PnKind::Transformer,
        PnKind::Conformer,
        PnKind::NAvg,
        PnKind::NConcat,
        PnKind::Stateless,
    ];
}

impl FromStr for PnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lstm" => PnKind::Lstm,
            "transformer" => PnKind::Transformer,
            "conformer" => PnKind::Conformer,
            "navg" => PnKind::NAvg,
            "nconcat" => PnKind::NConcat,
            "stateless" => PnKind::Stateless,
            other => return Err(Error::config("pn.kind", format!("unknown prediction network `{other}`"))),
        })
    }
}

impl fmt::Display for PnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PnKind::Lstm => "lstm",
            PnKind::Transformer => "transformer",
            PnKind::Conformer => "conformer",
            PnKind::NAvg => "navg",
            PnKind::NConcat => "nconcat",
            PnKind::Stateless => "stateless",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnConfig {
    pub kind: PnKind,
    /// Label vocabulary size, blank excluded.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Tokens visible to the Transformer and Conformer networks.
    pub left_context: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    /// n-gram order; the mixers see `ngram_n - 1` previous tokens.
    pub ngram_n: usize,
    /// Reuse the embedding table as the joiner's label output layer.
    pub tie_embeddings: bool,
}

impl PnConfig {
    pub fn new(kind: PnKind, vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            kind,
            vocab_size,
            embed_dim,
            heads: 1,
            left_context: 4,
            ff_dim: 2 * embed_dim,
            conv_kernel: 3,
            ngram_n: 5,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        match self.kind {
            PnKind::Lstm => {}
            PnKind::NAvg | PnKind::NConcat => {
                if self.ngram_n < 2 {
                    return Err(Error::config("ngram_n", "N must be at least 2"));
                }
            }
            PnKind::Stateless => {}
            PnKind::Transformer | PnKind::Conformer => {
                if self.left_context == 0 {
                    return Err(Error::config("left_context", "L must be at least 1"));
                }
                if self.ff_dim == 0 {
                    return Err(Error::config("ff_dim", "must be positive"));
                }
                if self.kind == PnKind::Conformer && self.conv_kernel % 2 == 0 {
                    return Err(Error::config("conv_kernel", "kernel must be odd"));
                }
            }
        }
        let needs_split = matches!(
            self.kind,
            PnKind::NConcat | PnKind::Stateless | PnKind::Transformer | PnKind::Conformer
        );
        if needs_split && self.embed_dim % self.heads != 0 {
            return Err(Error::config("heads", "H must divide D"));
        }
        Ok(())
    }

    /// Number of previous tokens the network conditions on; `None` is unbounded.
    pub fn context(&self) -> Option<usize> {
        match self.kind {
            PnKind::Lstm => None,
            PnKind::NAvg | PnKind::NConcat => Some(self.ngram_n - 1),
            PnKind::Stateless => Some(1),
            PnKind::Transformer | PnKind::Conformer => Some(self.left_context),
        }
    }

    /// Effective n-gram order; the stateless network is a bigram N-Concat.
    fn order(&self) -> usize {
        match self.kind {
            PnKind::Stateless => 2,
            _ => self.ngram_n,
        }
    }
}

/// Fixed-capacity history of the most recent token ids, newest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenWindow {
    tokens: VecDeque<usize>,
    capacity: usize,
}

impl TokenWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            tokens: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, token: usize) {
        if self.tokens.len() == self.capacity {
            self.tokens.pop_back();
        }
        self.tokens.push_front(token);
    }

    /// Token `n` steps back, `n = 0` being the newest.
    pub fn get(&self, n: usize) -> Option<usize> {
        self.tokens.get(n).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Per-hypothesis recurrent payload.
#[derive(Clone, Debug, PartialEq)]
pub enum PnState {
    Lstm { h: Vec<f64>, c: Vec<f64> },
    Window(TokenWindow),
}

#[derive(Clone, Debug)]
enum Body {
    Lstm(LstmCell),
    Ngram(NgramBody),
    Attention(AttentionBody),
}

/// A prediction network whose parameters live in an external [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PredictionNetwork {
    config: PnConfig,
    embed: ParamId,
    body: Body,
    active_context: Option<usize>,
}

impl PredictionNetwork {
    /// Registers parameters under `prefix` (normally `pn`).
    pub fn new(config: &PnConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let embed = store.add(
            format!("{prefix}.embed"),
            Tensor::uniform(&[config.vocab_size, d], bound, rng)?,
        )?;
        let body = match config.kind {
            PnKind::Lstm => Body::Lstm(LstmCell::new(store, prefix, d, rng)?),
            PnKind::NAvg => Body::Ngram(NgramBody::new(store, prefix, d, config.heads, 1, config.order(), rng)?),
            PnKind::NConcat | PnKind::Stateless => {
                Body::Ngram(NgramBody::new(store, prefix, d, 1, config.heads, config.order(), rng)?)
            }
            PnKind::Transformer | PnKind::Conformer => {
                Body::Attention(AttentionBody::new(store, prefix, config, rng)?)
            }
        };
        Ok(Self {
            config: config.clone(),
            embed,
            body,
            active_context: config.context(),
        })
    }

    pub fn config(&self) -> &PnConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    /// Context used at inference; the network still holds parameters for its
    /// full trained context.
    pub fn active_context(&self) -> Option<usize> {
        self.active_context
    }

    /// Restricts the visible history to the `c` newest tokens; older slots
    /// are treated as if the utterance had just started.
    pub fn set_inference_context(&mut self, c: usize) -> Result<()> {
        let Some(max) = self.config.context() else {
            return Err(Error::config("pn.context", "the LSTM network has unbounded context"));
        };
        if c == 0 || c > max {
            return Err(Error::config("pn.context", format!("context must be in 1..={max}, got {c}")));
        }
        self.active_context = Some(c);
        Ok(())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token == 0 {
            return Err(Error::BlankToken("prediction network"));
        }
        if token > self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Teacher-forced states `s_0..s_U`, shape `[(U+1) x D]`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        for &t in tokens {
            self.check_token(t)?;
        }
        let table = tape.param(self.embed);
        match &self.body {
            Body::Lstm(cell) => cell.forward(tape, table, tokens),
            _ => {
                let windows: Vec<TokenWindow> = std::iter::once(self.empty_window())
                    .chain((1..=tokens.len()).scan(self.empty_window(), |w, u| {
                        w.push(tokens[u - 1]);
                        Some(w.clone())
                    }))
                    .collect();
                self.window_states(tape, table, &windows)
            }
        }
    }

    fn empty_window(&self) -> TokenWindow {
        TokenWindow::new(self.config.context().unwrap_or(0))
    }

    /// Embedding rows for each slot of each window, newest slot first.
    fn slot_rows(&self, windows: &[TokenWindow]) -> Vec<Vec<Option<usize>>> {
        let cap = self.config.context().unwrap_or(0);
        let active = self.active_context.unwrap_or(cap);
        windows
            .iter()
            .map(|w| {
                (0..cap)
                    .map(|n| if n < active { w.get(n).map(|t| t - 1) } else { None })
                    .collect()
            })
            .collect()
    }

    fn window_states(&self, tape: &mut Tape, table: Var, windows: &[TokenWindow]) -> Result<Var> {
        let rows = self.slot_rows(windows);
        match &self.body {
            Body::Ngram(b) => b.forward(tape, table, &rows),
            Body::Attention(b) => b.forward(tape, table, &rows),
            Body::Lstm(_) => unreachable!("LSTM states are not windowed"),
        }
    }

    /// State before any token has been emitted, and `s_0`.
    pub fn start(&self, store: &ParamStore) -> Result<(PnState, Vec<f64>)> {
        match &self.body {
            Body::Lstm(cell) => {
                let d = self.dim();
                let state = PnState::Lstm {
                    h: vec![0.0; d],
                    c: vec![0.0; d],
                };
                self.advance(store, cell, &state, None)
            }
            _ => {
                let state = PnState::Window(self.empty_window());
                let s = self.window_output(store, &state)?;
                Ok((state, s))
            }
        }
    }

    /// Consumes one emitted token.
    pub fn step(&self, store: &ParamStore, state: &PnState, token: usize) -> Result<(PnState, Vec<f64>)> {
        self.check_token(token)?;
        match (&self.body, state) {
            (Body::Lstm(cell), PnState::Lstm { .. }) => self.advance(store, cell, state, Some(token)),
            (_, PnState::Window(w)) => {
                let mut w = w.clone();
                w.push(token);
                let state = PnState::Window(w);
                let s = self.window_output(store, &state)?;
                Ok((state, s))
            }
            _ => Err(Error::invalid("pn step", "state does not belong to this network")),
        }
    }

    fn advance(
        &self,
        store: &ParamStore,
        cell: &LstmCell,
        state: &PnState,
        token: Option<usize>,
    ) -> Result<(PnState, Vec<f64>)> {
        let PnState::Lstm { h, c } = state else {
            return Err(Error::invalid("pn step", "state does not belong to this network"));
        };
        let d = self.dim();
        let mut tape = Tape::no_grad(store);
        let table = tape.param(self.embed);
        let x = tape.gather_rows(table, vec![token.map(|t| t - 1)])?;
        let x = cell.project_input(&mut tape, x)?;
        let h0 = tape.constant(&[1, d], h.clone())?;
        let c0 = tape.constant(&[1, d], c.clone())?;
        let (h1, c1) = cell.cell(&mut tape, x, h0, c0)?;
        let h = tape.value(h1).to_vec();
        let c = tape.value(c1).to_vec();
        Ok((PnState::Lstm { h: h.clone(), c }, h))
    }

    fn window_output(&self, store: &ParamStore, state: &PnState) -> Result<Vec<f64>> {
        let PnState::Window(w) = state else {
            return Err(Error::invalid("pn step", "state does not belong to this network"));
        };
        let mut tape = Tape::no_grad(store);
        let table = tape.param(self.embed);
        let s = self.window_states(&mut tape, table, std::slice::from_ref(w))?;
        Ok(tape.value(s).to_vec())
    }

    /// Parameter counts of this network grouped by layer.
    pub fn param_report(&self, store: &ParamStore, prefix: &str) -> Vec<(String, usize)> {
        let p = format!("{prefix}.");
        store
            .group_counts()
            .into_iter()
            .filter(|(g, _)| g.starts_with(&p))
            .collect()
    }

    pub fn param_count(&self, store: &ParamStore, prefix: &str) -> usize {
        store.count_with_prefix(&format!("{prefix}."))
    }
}

/// Builds a standalone network in a fresh store, parameters under `pn`.
pub fn pn_init(config: &PnConfig, seed: u64) -> Result<(PredictionNetwork, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, Stream::Init);
    let pn = PredictionNetwork::new(config, &mut store, "pn", &mut rng)?;
    Ok((pn, store))
}

/// `sum_v ||E_v - mean(E)||^2` for a row-major `[rows x cols]` buffer.
pub fn spread_penalty_raw(data: &[f64], rows: usize, cols: usize) -> f64 {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, x) in mean.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    (0..rows)
        .map(|r| {
            data[r * cols..(r + 1) * cols]
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
        })
        .sum()
}

pub fn embedding_spread_penalty(e: &Tensor) -> Result<f64> {
    if e.shape().len() != 2 {
        return Err(Error::invalid("embedding_spread_penalty", "expected a matrix"));
    }
    Ok(spread_penalty_raw(e.data(), e.shape()[0], e.shape()[1]))
}

/// Largest Euclidean distance between any two rows.
pub fn max_row_distance(e: &Tensor) -> f64 {
    let (r, c) = (e.rows(), e.cols());
    let mut best = 0.0f64;
    for i in 0..r {
        for j in i + 1..r {
            let d: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(d.sqrt());
        }
        let _ = c;
    }
    best
}
