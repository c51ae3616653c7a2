//! Attention LSTM decoder with direction-selected attention heads.
//!
//! At every step the previous character is embedded, the hidden state
//! scores every cell of the feature grid through one of two attention heads
//! (chosen by the known text direction when selective attention is on), the
//! attention-weighted feature vector is added to the embedding, and one LSTM
//! step produces the logits for the next character.
//!
//! Everything runs batched: a batch of `N` samples decodes in lock-step and
//! single-sample calls are simply `N = 1`.

use rand::Rng;

use crate::autograd::{Tape, Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::routing::Direction;

/// Output symbols plus the end-of-sequence and padding classes. A start
/// symbol exists only as an extra embedding row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new("abcdefghijklmnopqrstuvwxyz0123456789").expect("default alphabet")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from distinct lowercase symbols.
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if c.is_uppercase() || c.is_whitespace() || symbols[..i].contains(c) {
                return Err(Error::Config(format!("invalid or repeated vocabulary symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Vocabulary { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Number of output classes (symbols, EOS and PAD).
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Embedding row used for the first step; never an output class.
    pub fn start(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        let lower = c.to_ascii_lowercase();
        self.symbols.iter().position(|&s| s == lower)
    }

    /// Class indices of `label` (case-insensitive), without EOS.
    pub fn encode(&self, label: &str) -> Result<Vec<usize>> {
        label
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Argument(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Text for a class sequence, stopping at the first EOS. PAD is skipped.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .take_while(|&&i| i != self.eos())
            .filter_map(|&i| self.symbols.get(i))
            .collect()
    }

    /// Printable name of one class, used in attention dump filenames.
    pub fn class_name(&self, index: usize) -> String {
        match self.symbols.get(index) {
            Some(c) => c.to_string(),
            None if index == self.eos() => "eos".into(),
            None if index == self.pad() => "pad".into(),
            None => format!("cls{index}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `d_in × 4·d_h`, gate blocks ordered input, forget, candidate, output.
    pub w_x: T,
    /// `d_h × 4·d_h`
    pub w_h: T,
    /// `4·d_h`
    pub bias: T,
}

/// One LSTM step on a batch: `x` is `N × d_in`, `(h, c)` are `N × d_h`.
/// Returns the new `(h, c)`; the step output is the new `h`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    (h, c): (Var, Var),
    params: &LstmParams<Var>,
) -> std::result::Result<(Var, Var), TensorError> {
    let hidden = tape.shape(c)[1];
    if tape.shape(params.w_h) != [hidden, 4 * hidden] {
        return Err(TensorError::Dimension {
            op: "lstm_step",
            detail: format!(
                "state width {hidden} against recurrent weights {:?}",
                tape.shape(params.w_h)
            ),
        });
    }
    let zx = tape.matmul(x, params.w_x)?;
    let zh = tape.matmul(h, params.w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row_bias(z, params.bias)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice_cols(z, k * hidden, hidden);
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    pub max_len: usize,
    pub use_san: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 128,
            attn_dim: 64,
            max_len: 24,
            use_san: false,
        }
    }
}

/// Decoder weights. Matrices multiply row vectors from the left
/// (`y = x · W`), so `W` is stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// `(V + 1) × C_f`: one row per class plus the start row.
    pub embed: T,
    pub lstm: LstmParams<T>,
    /// `d_h × d_a`; the only head when selective attention is off.
    pub w_s_h: T,
    /// `d_h × d_a`; present only with selective attention.
    pub w_s_v: Option<T>,
    /// `C_f × d_a`
    pub w_f: T,
    /// `d_a × 1`
    pub v_a: T,
    /// `d_h × V`
    pub w_out: T,
    /// `V`
    pub b_out: T,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl DecoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        config: &DecoderConfig,
        feature_channels: usize,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Self {
        let (c, h, a, v) = (feature_channels, config.hidden, config.attn_dim, vocab.len());
        let bound = 1.0 / (h as f64).sqrt();
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        DecoderParams {
            embed: glorot(v + 1, c, rng),
            lstm: LstmParams {
                w_x: Tensor::uniform(&[c, 4 * h], bound, rng),
                w_h: Tensor::uniform(&[h, 4 * h], bound, rng),
                bias: Tensor::from_vec(bias),
            },
            w_s_h: glorot(h, a, rng),
            w_s_v: config.use_san.then(|| glorot(h, a, rng)),
            w_f: glorot(c, a, rng),
            v_a: glorot(a, 1, rng),
            w_out: glorot(h, v, rng),
            b_out: Tensor::zeros(&[v]),
        }
    }

    pub fn zeros(config: &DecoderConfig, feature_channels: usize, vocab: &Vocabulary) -> Self {
        let (c, h, a, v) = (feature_channels, config.hidden, config.attn_dim, vocab.len());
        DecoderParams {
            embed: Tensor::zeros(&[v + 1, c]),
            lstm: LstmParams {
                w_x: Tensor::zeros(&[c, 4 * h]),
                w_h: Tensor::zeros(&[h, 4 * h]),
                bias: Tensor::zeros(&[4 * h]),
            },
            w_s_h: Tensor::zeros(&[h, a]),
            w_s_v: config.use_san.then(|| Tensor::zeros(&[h, a])),
            w_f: Tensor::zeros(&[c, a]),
            v_a: Tensor::zeros(&[a, 1]),
            w_out: Tensor::zeros(&[h, v]),
            b_out: Tensor::zeros(&[v]),
        }
    }
}

/// `x^c = W_c · onehot(prev)`, realised as a row gather.
pub fn char_embed(
    tape: &mut Tape,
    params: &DecoderParams<Var>,
    prev: &[usize],
) -> std::result::Result<Var, TensorError> {
    tape.embedding(params.embed, prev)
}

/// Feature grid prepared for attention: the cells as rows and their
/// projection through `W_f`, computed once per image batch.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    /// `(N·P) × C_f`
    pub cells: Var,
    /// `(N·P) × d_a`
    pub projected: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl FeatureGrid {
    pub fn cells_per_sample(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Flattens `N×C×H×W` (or `C×H×W`) features for attention.
pub fn prepare_features(
    tape: &mut Tape,
    features: Var,
    params: &DecoderParams<Var>,
) -> std::result::Result<FeatureGrid, TensorError> {
    let shape = tape.shape(features).to_vec();
    let (batch, grid) = match shape[..] {
        [_, h, w] => (1, (h, w)),
        [n, _, h, w] => (n, (h, w)),
        _ => {
            return Err(TensorError::Dimension {
                op: "prepare_features",
                detail: format!("expected a feature map, got {shape:?}"),
            })
        }
    };
    let cells = tape.to_cells(features)?;
    let projected = tape.matmul(cells, params.w_f)?;
    Ok(FeatureGrid {
        cells,
        projected,
        batch,
        grid,
    })
}

/// Attention for a batch: `e = V_aᵀ tanh(W_s s + W_f f_ij)` over every cell,
/// `α = softmax(e)`, `context = Σ α_ij f_ij`. Returns `(context N×C_f, α N×P)`.
///
/// With selective attention each row uses the head of its own direction and
/// the other head's output is never read.
pub fn attend(
    tape: &mut Tape,
    hidden: Var,
    grid: &FeatureGrid,
    directions: &[Direction],
    params: &DecoderParams<Var>,
) -> std::result::Result<(Var, Var), TensorError> {
    if directions.len() != grid.batch {
        return Err(TensorError::Dimension {
            op: "attend",
            detail: format!("{} directions for batch of {}", directions.len(), grid.batch),
        });
    }
    let s_h = tape.matmul(hidden, params.w_s_h)?;
    let s = match params.w_s_v {
        Some(w_s_v) => {
            let s_v = tape.matmul(hidden, w_s_v)?;
            let mask: Vec<bool> = directions.iter().map(|d| d.is_horizontal()).collect();
            tape.row_select(&mask, s_h, s_v)?
        }
        None => s_h,
    };
    let pre = tape.add_grouped(grid.projected, s)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, params.v_a)?;
    let scores = tape.reshape(scores, &[grid.batch, grid.cells_per_sample()])?;
    let alpha = tape.softmax(scores)?;
    let context = tape.attention_pool(alpha, grid.cells)?;
    Ok((context, alpha))
}

/// One attention map over the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Row-major `grid.0 × grid.1`.
    pub weights: Vec<f64>,
    pub grid: (usize, usize),
    /// Which head produced the map.
    pub head: Direction,
}

/// Batched decoding state.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    pub prev: Vec<usize>,
    pub t: usize,
    pub directions: Vec<Direction>,
}

impl DecoderState {
    /// Zero LSTM state and the start symbol for every sample.
    pub fn start(
        tape: &mut Tape,
        config: &DecoderConfig,
        vocab: &Vocabulary,
        directions: &[Direction],
    ) -> Self {
        let n = directions.len();
        DecoderState {
            hidden: tape.constant(Tensor::zeros(&[n, config.hidden])),
            cell: tape.constant(Tensor::zeros(&[n, config.hidden])),
            prev: vec![vocab.start(); n],
            t: 0,
            directions: directions.to_vec(),
        }
    }
}

/// Output of one [`decode_step`].
pub struct StepOutput {
    /// `N × V`
    pub logits: Var,
    /// `N × P`
    pub alpha: Var,
    pub state: DecoderState,
}

/// Advances every sample by one character. With `teacher` the next input is
/// the given class (ground truth); otherwise the argmax of the logits.
pub fn decode_step(
    tape: &mut Tape,
    config: &DecoderConfig,
    state: &DecoderState,
    grid: &FeatureGrid,
    params: &DecoderParams<Var>,
    teacher: Option<&[usize]>,
) -> Result<StepOutput> {
    if state.t >= config.max_len {
        return Err(Error::SequenceLength {
            step: state.t,
            max: config.max_len,
        });
    }
    let x_c = char_embed(tape, params, &state.prev)?;
    let (context, alpha) = attend(tape, state.hidden, grid, &state.directions, params)?;
    let x = tape.add(x_c, context)?;
    let (hidden, cell) = lstm_step(tape, x, (state.hidden, state.cell), &params.lstm)?;
    let logits = tape.matmul(hidden, params.w_out)?;
    let logits = tape.add_row_bias(logits, params.b_out)?;
    let prev = match teacher {
        Some(t) => {
            if t.len() != state.prev.len() {
                return Err(Error::Argument(format!(
                    "{} teacher symbols for batch of {}",
                    t.len(),
                    state.prev.len()
                )));
            }
            t.to_vec()
        }
        None => argmax_rows(tape.value(logits)),
    };
    Ok(StepOutput {
        logits,
        alpha,
        state: DecoderState {
            hidden,
            cell,
            prev,
            t: state.t + 1,
            directions: state.directions.clone(),
        },
    })
}

/// Index of the largest entry of every row (first one on ties).
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let v = *m.shape().last().expect("matrix");
    m.data()
        .chunks_exact(v)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect()
}

/// Decoding mode for [`decode_sequence`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Class indices of the label, without EOS; EOS is appended.
    Teacher(Vec<usize>),
}

/// Result of decoding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// `T × V`
    pub logits: Tensor,
    pub classes: Vec<usize>,
    /// Decoded text, EOS excluded.
    pub text: String,
    pub attention: Vec<AttentionRecord>,
}

/// Decodes a whole batch. In greedy mode each sample stops at its first EOS
/// (or after `max_len` steps); in teacher mode sample `n` runs
/// `labels[n].len() + 1` steps.
pub fn decode_batch(
    tape: &mut Tape,
    config: &DecoderConfig,
    vocab: &Vocabulary,
    grid: &FeatureGrid,
    directions: &[Direction],
    params: &DecoderParams<Var>,
    teacher: Option<&[Vec<usize>]>,
) -> Result<Vec<DecodeOutput>> {
    let n = directions.len();
    let v = vocab.len();
    let steps = match teacher {
        Some(labels) => labels.iter().map(|l| l.len() + 1).max().unwrap_or(1),
        None => config.max_len,
    };
    if steps > config.max_len {
        return Err(Error::SequenceLength {
            step: steps,
            max: config.max_len,
        });
    }
    let mut state = DecoderState::start(tape, config, vocab, directions);
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut attention: Vec<Vec<AttentionRecord>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    for t in 0..steps {
        let forced: Option<Vec<usize>> = teacher.map(|labels| {
            labels
                .iter()
                .map(|l| l.get(t).copied().unwrap_or(vocab.eos()))
                .collect()
        });
        let out = decode_step(tape, config, &state, grid, params, forced.as_deref())?;
        let step_logits = tape.value(out.logits);
        let predicted = argmax_rows(step_logits);
        let alpha = tape.value(out.alpha);
        let p = grid.cells_per_sample();
        for b in 0..n {
            if done[b] {
                continue;
            }
            logits[b].extend_from_slice(&step_logits.data()[b * v..(b + 1) * v]);
            classes[b].push(predicted[b]);
            attention[b].push(AttentionRecord {
                weights: alpha.data()[b * p..(b + 1) * p].to_vec(),
                grid: grid.grid,
                head: if params.w_s_v.is_some() {
                    directions[b]
                } else {
                    Direction::Horizontal
                },
            });
            done[b] = match teacher {
                Some(labels) => t >= labels[b].len(),
                None => predicted[b] == vocab.eos(),
            };
        }
        state = out.state;
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok((0..n)
        .map(|b| {
            let rows = classes[b].len();
            DecodeOutput {
                logits: Tensor::new(&[rows, v], std::mem::take(&mut logits[b])).expect("logit rows"),
                text: vocab.decode(&classes[b]),
                classes: std::mem::take(&mut classes[b]),
                attention: std::mem::take(&mut attention[b]),
            }
        })
        .collect())
}

/// Single-sample decoding from the start symbol and a zero state.
pub fn decode_sequence(
    tape: &mut Tape,
    config: &DecoderConfig,
    vocab: &Vocabulary,
    features: Var,
    direction: Direction,
    params: &DecoderParams<Var>,
    mode: &DecodeMode,
) -> Result<DecodeOutput> {
    let grid = prepare_features(tape, features, params)?;
    let teacher = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Teacher(label) => Some(vec![label.clone()]),
    };
    let mut out = decode_batch(tape, config, vocab, &grid, &[direction], params, teacher.as_deref())?;
    Ok(out.remove(0))
}

/// Per-step teacher-forced logits for a batch (`N × V` each), ready for the
/// loss. Step count is the longest label plus one.
pub fn teacher_forced_logits(
    tape: &mut Tape,
    config: &DecoderConfig,
    vocab: &Vocabulary,
    grid: &FeatureGrid,
    directions: &[Direction],
    params: &DecoderParams<Var>,
    labels: &[Vec<usize>],
) -> Result<Vec<Var>> {
    let steps = labels.iter().map(|l| l.len() + 1).max().unwrap_or(1);
    let mut state = DecoderState::start(tape, config, vocab, directions);
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let forced: Vec<usize> = labels
            .iter()
            .map(|l| l.get(t).copied().unwrap_or(vocab.eos()))
            .collect();
        let step = decode_step(tape, config, &state, grid, params, Some(&forced))?;
        out.push(step.logits);
        state = step.state;
    }
    Ok(out)
}

/// Targets for step `t` of a batch: the label character, EOS right after the
/// label, and `None` (ignored) beyond it.
pub fn step_targets(vocab: &Vocabulary, labels: &[Vec<usize>], t: usize) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|l| match t.cmp(&l.len()) {
            std::cmp::Ordering::Less => Some(l[t]),
            std::cmp::Ordering::Equal => Some(vocab.eos()),
            std::cmp::Ordering::Greater => None,
        })
        .collect()
}
