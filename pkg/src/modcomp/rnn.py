"""LSTM cell, sequence encoder, and exact backpropagation through time.

The gate formulation is the standard no-peephole LSTM:

    i = sigmoid(W_i x + U_i h + b_i)      input gate
    f = sigmoid(W_f x + U_f h + b_f)      forget gate
    o = sigmoid(W_o x + U_o h + b_o)      output gate
    g = tanh   (W_g x + U_g h + b_g)      candidate cell
    c' = f * c + i * g
    h' = o * tanh(c')

All arrays are float64. Ops accept a single vector (D,) or a batch (B, D);
sequences are (T, D) or (B, T, D). The sequence encoder advances one cell
step at a time through the same code path as :func:`lstm_cell_forward`, so
a sequence forward is bitwise identical to chaining cell calls by hand.

The backward pass is the exact reverse-mode of the recurrence. Parameter
gradients are summed over the batch (fixed reduction order), so duplicating
a batch element exactly doubles its contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError, StalenessError
from .linalg import contract

GATE_NAMES = ("i", "f", "o", "g")
LSTM_BLOCK_NAMES = ("W_i", "W_f", "W_o", "W_g", "U_i", "U_f", "U_o", "U_g",
                    "b_i", "b_f", "b_o", "b_g")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (no overflow warnings)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmParams:
    """One LSTM layer's gate weights and biases.

    W_* are (N, D_in) input weights, U_* are (N, N) recurrent weights,
    b_* are (N,) biases, for gates i, f, o, g.
    """

    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_g: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    def __post_init__(self):
        for name in self.blocks():
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        if self.W_i.ndim != 2:
            raise ShapeError(f"LstmParams.W_i: expected 2-D, got shape {self.W_i.shape}")
        n, d = self.W_i.shape
        for name, arr in self.blocks().items():
            expect = {"W": (n, d), "U": (n, n), "b": (n,)}[name[0]]
            if arr.shape != expect:
                raise ShapeError(f"LstmParams.{name}: shape {arr.shape}, expected {expect}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"LstmParams.{name}: non-finite entries")

    @property
    def hidden_units(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in a fixed order (live views)."""
        return {
            "W_i": self.W_i, "W_f": self.W_f, "W_o": self.W_o, "W_g": self.W_g,
            "U_i": self.U_i, "U_f": self.U_f, "U_o": self.U_o, "U_g": self.U_g,
            "b_i": self.b_i, "b_f": self.b_f, "b_o": self.b_o, "b_g": self.b_g,
        }

    def n_params(self) -> int:
        return sum(a.size for a in self.blocks().values())

    def fingerprint(self) -> tuple:
        """Cheap exact content token used to detect stale backward caches."""
        return tuple(float(a.sum()) for a in self.blocks().values())

    @classmethod
    def zeros(cls, input_dim: int, hidden_units: int) -> "LstmParams":
        n, d = hidden_units, input_dim
        return cls(
            *(np.zeros((n, d)) for _ in range(4)),
            *(np.zeros((n, n)) for _ in range(4)),
            *(np.zeros(n) for _ in range(4)),
        )


def init_lstm_params(input_dim: int, hidden_units: int, rng: np.random.Generator) -> LstmParams:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in); forget bias 1, others 0.

    Draw order is fixed (W_i..W_g then U_i..U_g) so identical seeds give
    bitwise-identical parameters.
    """
    sw = 1.0 / np.sqrt(input_dim)
    su = 1.0 / np.sqrt(hidden_units)
    ws = [rng.uniform(-sw, sw, size=(hidden_units, input_dim)) for _ in range(4)]
    us = [rng.uniform(-su, su, size=(hidden_units, hidden_units)) for _ in range(4)]
    bs = [np.zeros(hidden_units) for _ in range(4)]
    bs[1][:] = 1.0  # forget gate
    return LstmParams(*ws, *us, *bs)


@dataclass
class LstmState:
    """Hidden and cell state; (N,) for a single sample or (B, N) batched."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_units: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_units,) if batch is None else (batch, hidden_units)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class SequenceBatch:
    """A batch of equal-length feature sequences with class labels.

    features: (B, T, D) float64; labels: (B,) ints in [0, num_classes).
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise ShapeError(f"SequenceBatch.features: expected (B, T, D), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("SequenceBatch.labels: one label per sequence required")
        if self.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"SequenceBatch.labels: outside [0, {self.num_classes})")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def take(self, idx: np.ndarray) -> "SequenceBatch":
        return SequenceBatch(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class TapeCache:
    """Per-timestep activations retained by a sequence forward for exact BPTT."""

    x: np.ndarray        # (B, T, D) inputs
    gates: dict          # name -> (B, T, N) activations for i, f, o, g
    c: np.ndarray        # (B, T, N) cell states
    tanh_c: np.ndarray   # (B, T, N)
    h: np.ndarray        # (B, T, N) hidden states
    h0: np.ndarray       # (B, N) initial hidden
    c0: np.ndarray       # (B, N) initial cell
    params_fingerprint: tuple = field(repr=False, default=())

    @property
    def seq_len(self) -> int:
        return self.x.shape[1]


def _cell_step(x, h_prev, c_prev, p: LstmParams):
    """One gate evaluation on batched (B, D)/(B, N) arrays."""
    a_i = contract("bd,nd->bn", x, p.W_i) + contract("bm,nm->bn", h_prev, p.U_i) + p.b_i
    a_f = contract("bd,nd->bn", x, p.W_f) + contract("bm,nm->bn", h_prev, p.U_f) + p.b_f
    a_o = contract("bd,nd->bn", x, p.W_o) + contract("bm,nm->bn", h_prev, p.U_o) + p.b_o
    a_g = contract("bd,nd->bn", x, p.W_g) + contract("bm,nm->bn", h_prev, p.U_g) + p.b_g
    i, f, o, g = sigmoid(a_i), sigmoid(a_f), sigmoid(a_o), np.tanh(a_g)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return i, f, o, g, c, tc, h


def lstm_cell_forward(x, prev: LstmState, p: LstmParams):
    """Advance one timestep; returns (new state, cache entry for backward)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    hb = prev.h[None, :] if single else prev.h
    cb = prev.c[None, :] if single else prev.c
    if xb.shape[1] != p.input_dim or hb.shape[1] != p.hidden_units:
        raise ShapeError(
            f"lstm_cell_forward: input dim {xb.shape[1]}, state dim {hb.shape[1]} "
            f"vs params ({p.input_dim}, {p.hidden_units})"
        )
    i, f, o, g, c, tc, h = _cell_step(xb, hb, cb, p)
    entry = {"x": xb, "h_prev": hb, "c_prev": cb, "i": i, "f": f, "o": o, "g": g, "c": c, "tanh_c": tc}
    if single:
        return LstmState(h[0], c[0]), entry
    return LstmState(h, c), entry


def lstm_sequence_forward(seq, p: LstmParams, initial: LstmState | None = None):
    """Run the cell over a (B, T, D) or (T, D) sequence; initial state zeros.

    Returns (H, cache): H[t] is the hidden state after consuming step t.
    """
    x = np.ascontiguousarray(seq, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence_forward: expected (B, T, D), got {x.shape}")
    B, T, D = x.shape
    if T == 0:
        raise EmptyInputError("lstm_sequence_forward: empty sequence")
    if D != p.input_dim:
        raise ShapeError(f"lstm_sequence_forward: feature dim {D} vs params {p.input_dim}")
    N = p.hidden_units
    if initial is None:
        initial = LstmState.zeros(N, batch=B)
    h = np.broadcast_to(initial.h, (B, N)).astype(np.float64, copy=True)
    c = np.broadcast_to(initial.c, (B, N)).astype(np.float64, copy=True)
    h0, c0 = h.copy(), c.copy()

    gates = {name: np.empty((B, T, N)) for name in GATE_NAMES}
    C = np.empty((B, T, N))
    TC = np.empty((B, T, N))
    H = np.empty((B, T, N))
    for t in range(T):
        i, f, o, g, c, tc, h = _cell_step(x[:, t], h, c, p)
        gates["i"][:, t], gates["f"][:, t], gates["o"][:, t], gates["g"][:, t] = i, f, o, g
        C[:, t], TC[:, t], H[:, t] = c, tc, h

    cache = TapeCache(x=x, gates=gates, c=C, tanh_c=TC, h=H, h0=h0, c0=c0,
                      params_fingerprint=p.fingerprint())
    return (H[0] if single else H), cache


def lstm_backward(upstream, cache: TapeCache, p: LstmParams):
    """Exact reverse-mode of the sequence forward.

    upstream is dL/dH with shape matching the forward's H ((B, T, N) or
    (T, N)). Returns (param gradients as an LstmParams, input gradients
    shaped like the forward input). Parameter gradients sum over batch
    and time.
    """
    if cache.params_fingerprint != p.fingerprint():
        raise StalenessError("lstm_backward: cache does not match current parameters")
    dH = np.asarray(upstream, dtype=np.float64)
    single = dH.ndim == 2
    if single:
        dH = dH[None]
    B, T, N = cache.h.shape
    if dH.shape != (B, T, N):
        raise ShapeError(f"lstm_backward: upstream shape {dH.shape}, expected {(B, T, N)}")

    i, f, o, g = (cache.gates[k] for k in GATE_NAMES)
    tc = cache.tanh_c
    # Gate pre-activation gradients, filled back-to-front, contracted in bulk.
    dA = {name: np.empty((B, T, N)) for name in GATE_NAMES}
    dh_next = np.zeros((B, N))
    dc_next = np.zeros((B, N))
    for t in range(T - 1, -1, -1):
        c_prev = cache.c[:, t - 1] if t > 0 else cache.c0
        dh = dH[:, t] + dh_next
        do = dh * tc[:, t]
        dc = dc_next + dh * o[:, t] * (1.0 - tc[:, t] ** 2)
        di = dc * g[:, t]
        df = dc * c_prev
        dg = dc * i[:, t]
        dA["i"][:, t] = di * i[:, t] * (1.0 - i[:, t])
        dA["f"][:, t] = df * f[:, t] * (1.0 - f[:, t])
        dA["o"][:, t] = do * o[:, t] * (1.0 - o[:, t])
        dA["g"][:, t] = dg * (1.0 - g[:, t] ** 2)
        dh_next = (
            contract("bn,nm->bm", dA["i"][:, t], p.U_i)
            + contract("bn,nm->bm", dA["f"][:, t], p.U_f)
            + contract("bn,nm->bm", dA["o"][:, t], p.U_o)
            + contract("bn,nm->bm", dA["g"][:, t], p.U_g)
        )
        dc_next = dc * f[:, t]

    h_prev = np.concatenate([cache.h0[:, None, :], cache.h[:, :-1]], axis=1)
    W = {"i": p.W_i, "f": p.W_f, "o": p.W_o, "g": p.W_g}
    grads = {}
    dx = np.zeros_like(cache.x)
    for name in GATE_NAMES:
        grads[f"W_{name}"] = contract("btn,btd->nd", dA[name], cache.x)
        grads[f"U_{name}"] = contract("btn,btm->nm", dA[name], h_prev)
        grads[f"b_{name}"] = dA[name].sum(axis=(0, 1))
        dx += contract("btn,nd->btd", dA[name], W[name])
    param_grads = LstmParams(**grads)
    return param_grads, (dx[0] if single else dx)


def dropout_forward(h, rate: float, rng: np.random.Generator, training: bool):
    """Inverted dropout: zero with probability `rate`, scale survivors.

    Returns (output, mask) where mask holds the multiplicative factors
    (0 or 1/(1-rate)); at inference or rate 0 the op is the identity and
    the mask is all ones. Backward is grad * mask.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    h = np.asarray(h, dtype=np.float64)
    if not training or rate == 0.0:
        return h.copy(), np.ones_like(h)
    keep = rng.random(h.shape) >= rate
    mask = keep / (1.0 - rate)
    return h * mask, mask
