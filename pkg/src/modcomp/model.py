"""Network variants, classifier head, descriptors, and score fusion.

Two source-stream architectures share a parameter budget:

* ResLstmModel: main LSTM -> [residual path: LSTM -> FC] with a skip
  connection, H_t = FC(R_t) + z_t. The residual LSTM's hidden states R are
  what the adaptation distances read (via their temporal mean r_hat); the
  skip keeps source-specific information intact.
* VLstmModel: plain stack LSTM -> LSTM -> FC, no skip; adaptation reads the
  second LSTM's hidden states.

The auxiliary stream is a single frozen LSTM encoder; its descriptors a_hat
are targets only and never receive gradients.

Classification maps the temporal mean of the final hidden sequence through
an affine head to per-class logits. Dropout (inverted, train-time only)
is applied to LSTM hidden outputs on the way to the next layer; two flags
control the residual path: `res_lstm_dropout` (after the residual LSTM,
default on, matching the other LSTM outputs) and `res_fc_dropout` (after
the FC, before the skip addition, default off).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .adaptation import DescriptorBatch
from .errors import ConfigError, EmptyInputError, NumericError, ShapeError, StateError
from .linalg import contract
from .rnn import (
    LstmParams,
    SequenceBatch,
    dropout_forward,
    init_lstm_params,
    lstm_backward,
    lstm_sequence_forward,
)


@dataclass
class ClassifierHead:
    """Affine map from mean hidden state to per-class logits."""

    W: np.ndarray  # (C, N)
    b: np.ndarray  # (C,)

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"ClassifierHead: W {self.W.shape} and b {self.b.shape} disagree")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


def params_checksum(blocks: dict[str, np.ndarray]) -> str:
    """SHA-256 over the named parameter blocks in a fixed order."""
    h = hashlib.sha256()
    for name in sorted(blocks):
        h.update(name.encode())
        h.update(np.ascontiguousarray(blocks[name], dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class AuxiliaryEncoder:
    """Single-layer LSTM encoding the auxiliary stream; frozen after pretraining."""

    lstm: LstmParams
    frozen: bool = False
    pretrain_accuracy: float | None = None  # classification train accuracy at freeze time

    def freeze(self) -> None:
        self.frozen = True

    def checksum(self) -> str:
        return params_checksum({f"lstm.{k}": v for k, v in self.lstm.blocks().items()})

    @property
    def hidden_units(self) -> int:
        return self.lstm.hidden_units


def _stack_param_count(input_dim: int, hidden_units: int, num_classes: int) -> int:
    """Parameter budget shared by both model variants."""
    lstm1 = 4 * (hidden_units * input_dim + hidden_units * hidden_units + hidden_units)
    lstm2 = 4 * (hidden_units * hidden_units + hidden_units * hidden_units + hidden_units)
    fc = hidden_units * hidden_units + hidden_units
    head = num_classes * hidden_units + num_classes
    return lstm1 + lstm2 + fc + head


@dataclass
class ResLstmModel:
    """Main LSTM plus an LSTM->FC residual path joined by a skip connection."""

    main_lstm: LstmParams
    res_lstm: LstmParams
    res_fc_W: np.ndarray  # (N, N)
    res_fc_b: np.ndarray  # (N,)
    head: ClassifierHead
    dropout_rate: float = 0.5
    res_lstm_dropout: bool = True
    res_fc_dropout: bool = False
    kind: str = field(default="res_lstm", init=False)

    def __post_init__(self):
        self.res_fc_W = np.ascontiguousarray(self.res_fc_W, dtype=np.float64)
        self.res_fc_b = np.ascontiguousarray(self.res_fc_b, dtype=np.float64)
        n = self.main_lstm.hidden_units
        if self.res_lstm.hidden_units != n or self.res_lstm.input_dim != n:
            raise ShapeError("ResLstmModel: residual LSTM must map N -> N to allow the skip addition")
        if self.res_fc_W.shape != (n, n) or self.res_fc_b.shape != (n,):
            raise ShapeError("ResLstmModel: residual FC must map N -> N")
        if self.head.W.shape[1] != n:
            raise ShapeError("ResLstmModel: head input dim must equal N")
        assert self.param_count() == _stack_param_count(self.input_dim, n, self.head.num_classes)

    @property
    def hidden_units(self) -> int:
        return self.main_lstm.hidden_units

    @property
    def input_dim(self) -> int:
        return self.main_lstm.input_dim

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def param_blocks(self) -> dict[str, np.ndarray]:
        blocks = {f"main_lstm.{k}": v for k, v in self.main_lstm.blocks().items()}
        blocks.update({f"res_lstm.{k}": v for k, v in self.res_lstm.blocks().items()})
        blocks["res_fc.W"] = self.res_fc_W
        blocks["res_fc.b"] = self.res_fc_b
        blocks["head.W"] = self.head.W
        blocks["head.b"] = self.head.b
        return blocks

    def param_count(self) -> int:
        return sum(a.size for a in self.param_blocks().values())


@dataclass
class VLstmModel:
    """Two stacked LSTM layers and an FC, no skip; same parameter count."""

    lstm1: LstmParams
    lstm2: LstmParams
    fc_W: np.ndarray
    fc_b: np.ndarray
    head: ClassifierHead
    dropout_rate: float = 0.5
    kind: str = field(default="v_lstm", init=False)

    def __post_init__(self):
        self.fc_W = np.ascontiguousarray(self.fc_W, dtype=np.float64)
        self.fc_b = np.ascontiguousarray(self.fc_b, dtype=np.float64)
        n = self.lstm1.hidden_units
        if self.lstm2.hidden_units != n or self.lstm2.input_dim != n:
            raise ShapeError("VLstmModel: second LSTM must map N -> N")
        if self.fc_W.shape != (n, n) or self.fc_b.shape != (n,):
            raise ShapeError("VLstmModel: FC must map N -> N")
        if self.head.W.shape[1] != n:
            raise ShapeError("VLstmModel: head input dim must equal N")
        assert self.param_count() == _stack_param_count(self.input_dim, n, self.head.num_classes)

    @property
    def hidden_units(self) -> int:
        return self.lstm1.hidden_units

    @property
    def input_dim(self) -> int:
        return self.lstm1.input_dim

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def param_blocks(self) -> dict[str, np.ndarray]:
        blocks = {f"lstm1.{k}": v for k, v in self.lstm1.blocks().items()}
        blocks.update({f"lstm2.{k}": v for k, v in self.lstm2.blocks().items()})
        blocks["fc.W"] = self.fc_W
        blocks["fc.b"] = self.fc_b
        blocks["head.W"] = self.head.W
        blocks["head.b"] = self.head.b
        return blocks

    def param_count(self) -> int:
        return sum(a.size for a in self.param_blocks().values())


def init_head(hidden_units: int, num_classes: int, rng: np.random.Generator) -> ClassifierHead:
    s = 1.0 / np.sqrt(hidden_units)
    return ClassifierHead(rng.uniform(-s, s, size=(num_classes, hidden_units)), np.zeros(num_classes))


def init_res_lstm(input_dim: int, hidden_units: int, num_classes: int,
                  rng: np.random.Generator, dropout_rate: float = 0.5,
                  res_lstm_dropout: bool = True, res_fc_dropout: bool = False) -> ResLstmModel:
    s = 1.0 / np.sqrt(hidden_units)
    return ResLstmModel(
        main_lstm=init_lstm_params(input_dim, hidden_units, rng),
        res_lstm=init_lstm_params(hidden_units, hidden_units, rng),
        res_fc_W=rng.uniform(-s, s, size=(hidden_units, hidden_units)),
        res_fc_b=np.zeros(hidden_units),
        head=init_head(hidden_units, num_classes, rng),
        dropout_rate=dropout_rate,
        res_lstm_dropout=res_lstm_dropout,
        res_fc_dropout=res_fc_dropout,
    )


def init_v_lstm(input_dim: int, hidden_units: int, num_classes: int,
                rng: np.random.Generator, dropout_rate: float = 0.5) -> VLstmModel:
    s = 1.0 / np.sqrt(hidden_units)
    return VLstmModel(
        lstm1=init_lstm_params(input_dim, hidden_units, rng),
        lstm2=init_lstm_params(hidden_units, hidden_units, rng),
        fc_W=rng.uniform(-s, s, size=(hidden_units, hidden_units)),
        fc_b=np.zeros(hidden_units),
        head=init_head(hidden_units, num_classes, rng),
        dropout_rate=dropout_rate,
    )


@dataclass
class StreamForward:
    """Everything a source-stream forward produces (and backward consumes)."""

    H: np.ndarray              # (B, T, N) final hidden sequence
    R: np.ndarray              # (B, T, N) adaptation-facing hidden sequence
    r_hat: DescriptorBatch     # temporal means of R
    cache: dict


def _descriptors(R: np.ndarray, labels: np.ndarray, modality: str) -> DescriptorBatch:
    return DescriptorBatch(R.sum(axis=1) / R.shape[1], labels, modality)


def encode_auxiliary(s: SequenceBatch, enc: AuxiliaryEncoder):
    """Frozen-encoder forward: hidden sequences A and their temporal means.

    No cache is retained, so no gradient can ever flow into the encoder.
    """
    if not enc.frozen:
        raise StateError("encode_auxiliary: encoder must be frozen (pretrain it first)")
    if s.feature_dim != enc.lstm.input_dim:
        raise ShapeError(f"encode_auxiliary: feature dim {s.feature_dim} vs encoder {enc.lstm.input_dim}")
    A, _ = lstm_sequence_forward(s.features, enc.lstm)
    return A, _descriptors(A, s.labels, "auxiliary")


def res_forward(v: SequenceBatch, m: ResLstmModel, training: bool = False,
                rng: np.random.Generator | None = None) -> StreamForward:
    """Residual-stream forward pass.

    Per timestep: z = main LSTM hidden output, R = residual LSTM on z,
    H = FC(R) + z. r_hat averages the raw (pre-dropout) R over time.
    """
    if training and m.dropout_rate > 0 and rng is None:
        raise ConfigError("res_forward: training with dropout needs an rng")
    z, main_cache = lstm_sequence_forward(v.features, m.main_lstm)
    z_d, mask_z = dropout_forward(z, m.dropout_rate, rng, training)
    R, res_cache = lstm_sequence_forward(z_d, m.res_lstm)
    if m.res_lstm_dropout:
        R_d, mask_r = dropout_forward(R, m.dropout_rate, rng, training)
    else:
        R_d, mask_r = R, None
    F = contract("btn,mn->btm", R_d, m.res_fc_W) + m.res_fc_b
    if m.res_fc_dropout:
        F, mask_f = dropout_forward(F, m.dropout_rate, rng, training)
    else:
        mask_f = None
    H = F + z_d
    cache = {"main": main_cache, "res": res_cache, "mask_z": mask_z,
             "mask_r": mask_r, "mask_f": mask_f, "R_d": R_d}
    return StreamForward(H=H, R=R, r_hat=_descriptors(R, v.labels, "source"), cache=cache)


def res_backward(dH: np.ndarray, d_rhat: np.ndarray, fwd: StreamForward,
                 m: ResLstmModel) -> dict[str, np.ndarray]:
    """Gradients of the residual stream given dL/dH and dL/dr_hat."""
    cache = fwd.cache
    T = fwd.H.shape[1]
    dF = dH if cache["mask_f"] is None else dH * cache["mask_f"]
    g_fc_W = contract("btm,btn->mn", dF, cache["R_d"])
    g_fc_b = dF.sum(axis=(0, 1))
    dR_d = contract("btm,mn->btn", dF, m.res_fc_W)
    dR = dR_d if cache["mask_r"] is None else dR_d * cache["mask_r"]
    dR = dR + d_rhat[:, None, :] / T
    res_grads, dz_d = lstm_backward(dR, cache["res"], m.res_lstm)
    dz = (dz_d + dH) * cache["mask_z"]
    main_grads, _ = lstm_backward(dz, cache["main"], m.main_lstm)
    grads = {f"main_lstm.{k}": v for k, v in main_grads.blocks().items()}
    grads.update({f"res_lstm.{k}": v for k, v in res_grads.blocks().items()})
    grads["res_fc.W"] = g_fc_W
    grads["res_fc.b"] = g_fc_b
    return grads


def v_forward(v: SequenceBatch, m: VLstmModel, training: bool = False,
              rng: np.random.Generator | None = None) -> StreamForward:
    """Stacked-stream forward: LSTM -> LSTM -> FC, no skip."""
    if training and m.dropout_rate > 0 and rng is None:
        raise ConfigError("v_forward: training with dropout needs an rng")
    h1, cache1 = lstm_sequence_forward(v.features, m.lstm1)
    h1_d, mask1 = dropout_forward(h1, m.dropout_rate, rng, training)
    R, cache2 = lstm_sequence_forward(h1_d, m.lstm2)
    R_d, mask2 = dropout_forward(R, m.dropout_rate, rng, training)
    H = contract("btn,mn->btm", R_d, m.fc_W) + m.fc_b
    cache = {"l1": cache1, "l2": cache2, "mask1": mask1, "mask2": mask2, "R_d": R_d}
    return StreamForward(H=H, R=R, r_hat=_descriptors(R, v.labels, "source"), cache=cache)


def v_backward(dH: np.ndarray, d_rhat: np.ndarray, fwd: StreamForward,
               m: VLstmModel) -> dict[str, np.ndarray]:
    cache = fwd.cache
    T = fwd.H.shape[1]
    g_fc_W = contract("btm,btn->mn", dH, cache["R_d"])
    g_fc_b = dH.sum(axis=(0, 1))
    dR_d = contract("btm,mn->btn", dH, m.fc_W)
    dR = dR_d * cache["mask2"] + d_rhat[:, None, :] / T
    l2_grads, dh1_d = lstm_backward(dR, cache["l2"], m.lstm2)
    dh1 = dh1_d * cache["mask1"]
    l1_grads, _ = lstm_backward(dh1, cache["l1"], m.lstm1)
    grads = {f"lstm1.{k}": v for k, v in l1_grads.blocks().items()}
    grads.update({f"lstm2.{k}": v for k, v in l2_grads.blocks().items()})
    grads["fc.W"] = g_fc_W
    grads["fc.b"] = g_fc_b
    return grads


def stream_forward(v: SequenceBatch, m, training: bool = False, rng=None) -> StreamForward:
    """Dispatch on the model kind."""
    if m.kind == "res_lstm":
        return res_forward(v, m, training, rng)
    return v_forward(v, m, training, rng)


def stream_backward(dH, d_rhat, fwd: StreamForward, m) -> dict[str, np.ndarray]:
    if m.kind == "res_lstm":
        return res_backward(dH, d_rhat, fwd, m)
    return v_backward(dH, d_rhat, fwd, m)


def classify(H, head: ClassifierHead) -> np.ndarray:
    """Logits from the temporal mean of the hidden sequence.

    H is (T, N) for one sample or (B, T, N) batched.
    """
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 2
    if single:
        H = H[None]
    if H.ndim != 3:
        raise ShapeError(f"classify: expected (B, T, N), got {H.shape}")
    if H.shape[1] == 0:
        raise EmptyInputError("classify: empty hidden sequence")
    if H.shape[2] != head.W.shape[1]:
        raise ShapeError(f"classify: hidden dim {H.shape[2]} vs head {head.W.shape[1]}")
    mean_h = H.sum(axis=1) / H.shape[1]
    logits = contract("bn,cn->bc", mean_h, head.W) + head.b
    return logits[0] if single else logits


def classify_backward(dlogits: np.ndarray, H: np.ndarray, head: ClassifierHead):
    """Head gradients plus dL/dH for a batched classify call."""
    T = H.shape[1]
    mean_h = H.sum(axis=1) / T
    g_W = contract("bc,bn->cn", dlogits, mean_h)
    g_b = dlogits.sum(axis=0)
    dH = contract("bc,cn->bn", dlogits, head.W)[:, None, :] / T
    return {"head.W": g_W, "head.b": g_b}, np.broadcast_to(dH, H.shape).copy()


def softmax(g) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("softmax: non-finite logits")
    shifted = g - g.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


PROB_CLAMP = 1e-300


def cross_entropy(p, labels) -> float:
    """Summed negative log-likelihood of the true classes.

    Probabilities are clamped at 1e-300 before the log; callers that need
    to flag clamping in metrics can count with clamped_count().
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if p.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: {p.shape[0]} rows vs {labels.shape[0]} labels")
    true_p = p[np.arange(p.shape[0]), labels]
    return float(-np.log(np.maximum(true_p, PROB_CLAMP)).sum())


def clamped_count(p, labels) -> int:
    """How many true-class probabilities hit the cross-entropy clamp."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return int((p[np.arange(p.shape[0]), labels] < PROB_CLAMP).sum())


def score_fusion(p_streams, w) -> np.ndarray:
    """Convex combination of per-stream class probabilities."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or len(p_streams) != w.shape[0]:
        raise ConfigError("score_fusion: one weight per stream required")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ConfigError(f"score_fusion: weights must be non-negative and sum to 1, got {w.tolist()}")
    streams = [np.asarray(p, dtype=np.float64) for p in p_streams]
    shape = streams[0].shape
    if any(s.shape != shape for s in streams):
        raise ShapeError("score_fusion: streams must share shape")
    fused = np.zeros(shape)
    for wi, s in zip(w, streams):
        fused += wi * s
    return fused


def predict(p) -> np.ndarray:
    """Argmax class per row; exact ties resolve to the lowest index."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return p.argmax(axis=1)
