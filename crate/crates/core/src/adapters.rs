//! Bottleneck modules inserted into a frozen backbone.
//!
//! * [`ReadAdapter`]: `Õ = O + GELU(Cell(O·W_down))·W_up + b_up`, where the
//!   recurrent cell scans the tokens of `O` in order from a zero state.
//! * [`PlainAdapter`]: the tokenwise `O + GELU(O·W_down + b_down)·W_up + b_up`.
//! * [`LoraPatch`]: a low-rank update `W + A·B` of a frozen projection.
//! * [`PromptTokens`]: learnable rows prepended to each modality.
//!
//! All of them are identities at initialization, so attaching one to a
//! frozen model leaves its outputs unchanged until training moves them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Owner, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Rnn, CellKind::Gru, CellKind::Lstm];

    /// Number of (input map, hidden map, bias) triples.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    /// Parameters of a cell at hidden width `k`.
    pub fn param_count(self, k: usize) -> usize {
        self.gates() * (2 * k * k + k)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown recurrent cell {other:?}"))),
        }
    }
}

/// One affine map `x·W_x + h·W_h + b` feeding a gate or candidate.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

/// Shared-weight recurrent cell of width `k`.
///
/// Gate order: RNN `[candidate]`; GRU `[update, reset, candidate]`;
/// LSTM `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub width: usize,
    pub gates: Vec<GateParams>,
}

impl RecurrentCell {
    pub fn new(store: &mut ParamStore, prefix: &str, kind: CellKind, width: usize) -> Self {
        let names: &[&str] = match kind {
            CellKind::Rnn => &["cand"],
            CellKind::Gru => &["update", "reset", "cand"],
            CellKind::Lstm => &["input", "forget", "cand", "output"],
        };
        let gates = names
            .iter()
            .map(|g| GateParams {
                input: store.add(
                    format!("{prefix}.{g}.w_x"),
                    Tensor::zeros(&[width, width]),
                    ParamRole::Weight,
                    Owner::Strategy,
                ),
                hidden: store.add(
                    format!("{prefix}.{g}.w_h"),
                    Tensor::zeros(&[width, width]),
                    ParamRole::Weight,
                    Owner::Strategy,
                ),
                bias: store.add(
                    format!("{prefix}.{g}.b"),
                    Tensor::zeros(&[width]),
                    ParamRole::Bias,
                    Owner::Strategy,
                ),
            })
            .collect();
        Self { kind, width, gates }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates
            .iter()
            .flat_map(|g| [g.input, g.hidden, g.bias])
            .collect()
    }

    /// Gate whose input map carries the token into the state.
    fn candidate(&self) -> &GateParams {
        match self.kind {
            CellKind::Rnn => &self.gates[0],
            CellKind::Gru | CellKind::Lstm => &self.gates[2],
        }
    }
}

/// Hidden state (and LSTM cell state) between recurrence steps.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, kind: CellKind, width: usize) -> Self {
        let hidden = tape.constant(Tensor::zeros(&[1, width]));
        let cell = (kind == CellKind::Lstm).then(|| tape.constant(Tensor::zeros(&[1, width])));
        Self { hidden, cell }
    }
}

fn gate_pre(tape: &mut Tape, bound: &Bound, gate: &GateParams, x: Var, h: Var) -> Result<Var> {
    let xi = tape.matmul(x, bound[gate.input])?;
    let hh = tape.matmul(h, bound[gate.hidden])?;
    let s = tape.add(xi, hh)?;
    tape.add_row(s, bound[gate.bias])
}

/// One recurrence step on a `1×k` input row.
pub fn recurrent_cell_step(
    tape: &mut Tape,
    bound: &Bound,
    cell: &RecurrentCell,
    x: Var,
    state: CellState,
) -> Result<CellState> {
    let k = cell.width;
    for v in [x, state.hidden] {
        let s = tape.value(v).shape();
        if s != [1, k] {
            return Err(Error::dim("recurrent_cell_step", s, &[1, k]));
        }
    }
    let h = state.hidden;
    match cell.kind {
        CellKind::Rnn => {
            let pre = gate_pre(tape, bound, &cell.gates[0], x, h)?;
            Ok(CellState {
                hidden: tape.tanh(pre)?,
                cell: None,
            })
        }
        CellKind::Gru => {
            let z_pre = gate_pre(tape, bound, &cell.gates[0], x, h)?;
            let z = tape.sigmoid(z_pre)?;
            let r_pre = gate_pre(tape, bound, &cell.gates[1], x, h)?;
            let r = tape.sigmoid(r_pre)?;
            let rh = tape.mul(r, h)?;
            let cand = &cell.gates[2];
            let n_pre = gate_pre(tape, bound, cand, x, rh)?;
            let n = tape.tanh(n_pre)?;
            // h' = (1 − z)·n + z·h
            let one_minus_z = tape.affine(z, -1.0, 1.0)?;
            let keep_new = tape.mul(one_minus_z, n)?;
            let keep_old = tape.mul(z, h)?;
            Ok(CellState {
                hidden: tape.add(keep_new, keep_old)?,
                cell: None,
            })
        }
        CellKind::Lstm => {
            let c_prev = state
                .cell
                .ok_or_else(|| Error::Contract("LSTM step needs a cell state".into()))?;
            if tape.value(c_prev).shape() != [1, k] {
                return Err(Error::dim("recurrent_cell_step", tape.value(c_prev).shape(), &[1, k]));
            }
            let i_pre = gate_pre(tape, bound, &cell.gates[0], x, h)?;
            let i = tape.sigmoid(i_pre)?;
            let f_pre = gate_pre(tape, bound, &cell.gates[1], x, h)?;
            let f = tape.sigmoid(f_pre)?;
            let g_pre = gate_pre(tape, bound, &cell.gates[2], x, h)?;
            let g = tape.tanh(g_pre)?;
            let o_pre = gate_pre(tape, bound, &cell.gates[3], x, h)?;
            let o = tape.sigmoid(o_pre)?;
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let c = tape.add(fc, ig)?;
            let tc = tape.tanh(c)?;
            Ok(CellState {
                hidden: tape.mul(o, tc)?,
                cell: Some(c),
            })
        }
    }
}

/// Recurrent bottleneck adapter.
#[derive(Clone, Debug)]
pub struct ReadAdapter {
    pub d: usize,
    pub k: usize,
    pub w_down: ParamId,
    pub cell: RecurrentCell,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl ReadAdapter {
    /// Registers zero-valued parameters; call [`init_read_adapter`] next.
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, k: usize, kind: CellKind) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::Config(format!("bottleneck width k={k} must satisfy 0 < k < d={d}")));
        }
        let w_down = store.add(
            format!("{prefix}.w_down"),
            Tensor::zeros(&[d, k]),
            ParamRole::Weight,
            Owner::Strategy,
        );
        let cell = RecurrentCell::new(store, &format!("{prefix}.cell"), kind, k);
        let w_up = store.add(
            format!("{prefix}.w_up"),
            Tensor::zeros(&[k, d]),
            ParamRole::Weight,
            Owner::Strategy,
        );
        let b_up = store.add(format!("{prefix}.b_up"), Tensor::zeros(&[d]), ParamRole::Bias, Owner::Strategy);
        Ok(Self {
            d,
            k,
            w_down,
            cell,
            w_up,
            b_up,
        })
    }

    /// `d·k + cell + k·d + d`.
    pub fn param_count(d: usize, k: usize, kind: CellKind) -> usize {
        d * k + kind.param_count(k) + k * d + d
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down];
        ids.extend(self.cell.param_ids());
        ids.extend([self.w_up, self.b_up]);
        ids
    }
}

/// `O + GELU(Cell(O·W_down))·W_up + b_up` over the `n×d` token matrix `o`.
pub fn read_forward(tape: &mut Tape, bound: &Bound, adapter: &ReadAdapter, o: Var) -> Result<Var> {
    let shape = tape.value(o).shape().to_vec();
    if shape.len() != 2 || shape[1] != adapter.d {
        return Err(Error::dim("read_forward", &shape, &[0, adapter.d]));
    }
    let n = shape[0];
    let z = tape.matmul(o, bound[adapter.w_down])?;
    let mut state = CellState::zeros(tape, adapter.cell.kind, adapter.k);
    let mut hidden = Vec::with_capacity(n);
    for t in 0..n {
        let x = tape.slice_rows(z, t, 1)?;
        state = recurrent_cell_step(tape, bound, &adapter.cell, x, state)?;
        hidden.push(state.hidden);
    }
    let h = if n == 1 { hidden[0] } else { tape.concat_rows(&hidden)? };
    let act = tape.gelu(h)?;
    let up = tape.matmul(act, bound[adapter.w_up])?;
    let up = tape.add_row(up, bound[adapter.b_up])?;
    tape.add(o, up)
}

/// Tokenwise bottleneck adapter.
#[derive(Clone, Debug)]
pub struct PlainAdapter {
    pub d: usize,
    pub k: usize,
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl PlainAdapter {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, k: usize) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::Config(format!("bottleneck width k={k} must satisfy 0 < k < d={d}")));
        }
        Ok(Self {
            d,
            k,
            w_down: store.add(
                format!("{prefix}.w_down"),
                Tensor::zeros(&[d, k]),
                ParamRole::Weight,
                Owner::Strategy,
            ),
            b_down: store.add(format!("{prefix}.b_down"), Tensor::zeros(&[k]), ParamRole::Bias, Owner::Strategy),
            w_up: store.add(
                format!("{prefix}.w_up"),
                Tensor::zeros(&[k, d]),
                ParamRole::Weight,
                Owner::Strategy,
            ),
            b_up: store.add(format!("{prefix}.b_up"), Tensor::zeros(&[d]), ParamRole::Bias, Owner::Strategy),
        })
    }

    pub fn param_count(d: usize, k: usize) -> usize {
        d * k + k + k * d + d
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_down, self.b_down, self.w_up, self.b_up]
    }
}

pub fn plain_adapter_forward(tape: &mut Tape, bound: &Bound, adapter: &PlainAdapter, o: Var) -> Result<Var> {
    let shape = tape.value(o).shape().to_vec();
    if shape.len() != 2 || shape[1] != adapter.d {
        return Err(Error::dim("plain_adapter_forward", &shape, &[0, adapter.d]));
    }
    let down = tape.matmul(o, bound[adapter.w_down])?;
    let down = tape.add_row(down, bound[adapter.b_down])?;
    let act = tape.gelu(down)?;
    let up = tape.matmul(act, bound[adapter.w_up])?;
    let up = tape.add_row(up, bound[adapter.b_up])?;
    tape.add(o, up)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
}

/// Low-rank update `A·B` for a `d×d` projection.
#[derive(Clone, Debug)]
pub struct LoraPatch {
    pub d: usize,
    pub rank: usize,
    pub a: ParamId,
    pub b: ParamId,
    pub target: LoraTarget,
}

impl LoraPatch {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rank: usize, target: LoraTarget) -> Result<Self> {
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!("LoRA rank {rank} must satisfy 0 < r < d={d}")));
        }
        Ok(Self {
            d,
            rank,
            a: store.add(
                format!("{prefix}.lora_a"),
                Tensor::zeros(&[d, rank]),
                ParamRole::Weight,
                Owner::Strategy,
            ),
            b: store.add(
                format!("{prefix}.lora_b"),
                Tensor::zeros(&[rank, d]),
                ParamRole::Weight,
                Owner::Strategy,
            ),
            target,
        })
    }

    pub fn param_count(d: usize, rank: usize) -> usize {
        2 * d * rank
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.a, self.b]
    }
}

/// `W + A·B` on the tape.
pub fn lora_weight(tape: &mut Tape, bound: &Bound, w: Var, patch: &LoraPatch) -> Result<Var> {
    let delta = tape.matmul(bound[patch.a], bound[patch.b])?;
    tape.add(w, delta)
}

/// Value-level `W + A·B`.
pub fn lora_effective_weight(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = w.rows();
    if !w.is_matrix() || w.cols() != d {
        return Err(Error::dim("lora_effective_weight", w.shape(), &[d, d]));
    }
    let rank = a.cols();
    if rank > d {
        return Err(Error::Config(format!("LoRA rank {rank} exceeds width {d}")));
    }
    if a.rows() != d || b.rows() != rank || b.cols() != d {
        return Err(Error::dim("lora_effective_weight", a.shape(), b.shape()));
    }
    let mut tape = Tape::new();
    let (wv, av, bv) = (tape.constant(w.clone()), tape.constant(a.clone()), tape.constant(b.clone()));
    let delta = tape.matmul(av, bv)?;
    let out = tape.add(wv, delta)?;
    Ok(tape.value(out).clone())
}

/// Learnable rows prepended to the video and language streams.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub len: usize,
    pub video: ParamId,
    pub lang: ParamId,
}

impl PromptTokens {
    pub fn new(store: &mut ParamStore, prefix: &str, len: usize, d: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        Ok(Self {
            len,
            video: store.add(
                format!("{prefix}.video"),
                Tensor::zeros(&[len, d]),
                ParamRole::Prompt,
                Owner::Strategy,
            ),
            lang: store.add(
                format!("{prefix}.lang"),
                Tensor::zeros(&[len, d]),
                ParamRole::Prompt,
                Owner::Strategy,
            ),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.video, self.lang]
    }
}

/// How READ parameters start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadInit {
    /// Kaiming-normal `W_down`; every other parameter zero.
    Zero,
    /// As `Zero`, but the cell's candidate input map starts at the identity.
    ///
    /// With a zero cell the hidden state is identically zero, `GELU(0) = 0`,
    /// and every adapter gradient except `b_up` vanishes, so the branch
    /// cannot leave its initial point. An identity input map keeps the
    /// adapter an exact identity (since `W_up = 0`) while letting it train.
    #[default]
    IdentityInput,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Initializes a READ adapter: `W_down ~ Normal(0, 2/d)`, everything else
/// zero (plus the identity input map under [`ReadInit::IdentityInput`]).
pub fn init_read_adapter(store: &mut ParamStore, adapter: &ReadAdapter, seed: u64, init: ReadInit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in adapter.param_ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    *store.value_mut(adapter.w_down) = kaiming(&[adapter.d, adapter.k], adapter.d, &mut rng);
    if init == ReadInit::IdentityInput {
        *store.value_mut(adapter.cell.candidate().input) = Tensor::eye(adapter.k);
    }
}

/// Same scheme for the tokenwise adapter.
pub fn init_plain_adapter(store: &mut ParamStore, adapter: &PlainAdapter, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in adapter.param_ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    *store.value_mut(adapter.w_down) = kaiming(&[adapter.d, adapter.k], adapter.d, &mut rng);
}

/// `A` Kaiming-normal, `B` zero.
pub fn init_lora_patch(store: &mut ParamStore, patch: &LoraPatch, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    *store.value_mut(patch.a) = kaiming(&[patch.d, patch.rank], patch.d, &mut rng);
    *store.value_mut(patch.b) = Tensor::zeros(&[patch.rank, patch.d]);
}
