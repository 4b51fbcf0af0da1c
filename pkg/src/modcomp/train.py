"""Objective assembly, optimizer, training loops, weight sweep, gradient checker.

The per-step objective is

    L = CE + lambda * d

where CE is the summed cross-entropy over the batch and d the configured
adaptation distance between auxiliary and source descriptors. Gradients of
d flow into the adaptation-facing hidden sequence R (each timestep receives
grad / T through the temporal mean) and from there through BPTT into every
trainable upstream parameter; the auxiliary encoder is frozen and is
checksummed around every step to prove it.

Randomness is split into independent substreams (init / epoch shuffle /
auxiliary batch draws / dropout) so that a run with adaptation weight 0 is
bitwise identical to a run with adaptation disabled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import AdaptationConfig, DescriptorBatch, adaptation_distance
from .errors import ConfigError, NumericError, PairingError, ShapeError, StateError
from .model import (
    AuxiliaryEncoder,
    ClassifierHead,
    classify,
    classify_backward,
    clamped_count,
    cross_entropy,
    encode_auxiliary,
    init_head,
    init_res_lstm,
    init_v_lstm,
    predict,
    softmax,
    stream_backward,
    stream_forward,
)
from .rnn import LstmParams, SequenceBatch, dropout_forward, init_lstm_params, lstm_backward, lstm_sequence_forward
from .seeding import TAG_AUX_BATCH, TAG_DROPOUT, TAG_INIT, TAG_PRETRAIN, TAG_SHUFFLE, TAG_SWEEP, child_rng
from .synthdata import MultimodalDataset, split

DEFAULT_LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 20
    epochs: int = 40
    dropout_rate: float = 0.5
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def total_loss(ce: float, d: float, lam: float) -> float:
    """Combined objective: cross-entropy plus weighted adaptation distance."""
    if d < 0:
        raise NumericError(f"total_loss: adaptation distance must be >= 0, got {d}")
    if lam < 0:
        raise ConfigError(f"total_loss: lambda must be >= 0, got {lam}")
    return ce + lam * d


class AdamState:
    """First/second-moment accumulators mirroring a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    if set(params) != set(grads):
        raise ShapeError(f"adam_step: parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {theta.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)


@dataclass
class StepRecord:
    epoch: int
    step: int
    ce: float
    dist: float
    loss: float
    clamped: int


@dataclass
class EpochRecord:
    epoch: int
    ce: float          # mean over the epoch's steps
    dist: float
    loss: float
    train_acc: float
    val_acc: float     # nan when no validation set
    shuffle_sha: str   # digest of the epoch's shuffle order, for audit


@dataclass
class MetricsHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def final_train_acc(self) -> float:
        return self.epochs[-1].train_acc if self.epochs else float("nan")


def evaluate_stream(model, batch: SequenceBatch):
    """Eval-mode accuracy and per-sample class probabilities."""
    fwd = stream_forward(batch, model, training=False)
    probs = softmax(classify(fwd.H, model.head))
    acc = float((predict(probs) == batch.labels).mean()) if batch.size else float("nan")
    return acc, probs


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall curve, rank-by-score (stable ties).

    Equals sum over positive ranks of precision@k divided by the number of
    positives; nan when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, scores.size + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / n_pos)


def per_class_average_precision(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.array([average_precision(probs[:, c], labels == c) for c in range(num_classes)])


def _shuffle_digest(perm: np.ndarray) -> str:
    return hashlib.sha256(perm.astype(np.int64).tobytes()).hexdigest()[:16]


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_alignment(level: str, dataset: MultimodalDataset) -> None:
    """Fail fast when the data cannot support the adaptation level."""
    if level in ("sample", "joint") and dataset.pairing is None:
        raise PairingError(f"adaptation level {level!r} requires sample-aligned (paired) data")
    if level == "category":
        src_classes = set(dataset.source.labels.tolist())
        aux_classes = set(dataset.auxiliary.labels.tolist())
        if not src_classes <= aux_classes:
            raise PairingError("category-level adaptation requires every source class "
                               f"in the auxiliary pool; missing {sorted(src_classes - aux_classes)}")


def _draw_aux_batch(level: str, dataset: MultimodalDataset, src_idx: np.ndarray,
                    rng_aux: np.random.Generator) -> SequenceBatch:
    aux = dataset.auxiliary
    if level in ("sample", "joint"):
        return aux.take(dataset.pairing[src_idx])
    if level == "category":
        # Mirror the source batch's label multiset so every class present in
        # the batch appears in both modalities with equal counts.
        pools = {c: np.flatnonzero(aux.labels == c) for c in set(dataset.source.labels[src_idx].tolist())}
        picks = np.array([pools[l][rng_aux.integers(pools[l].size)]
                          for l in dataset.source.labels[src_idx]], dtype=np.int64)
        return aux.take(picks)
    # domain: an independent same-size draw from the auxiliary pool
    replace_draw = aux.size < src_idx.size
    return aux.take(rng_aux.choice(aux.size, size=src_idx.size, replace=replace_draw))


def train_step(model, enc, src_batch: SequenceBatch, aux_batch, cfg: TrainConfig,
               rng_dropout):
    """One forward/backward transaction; returns (ce, dist, loss, clamps, grads).

    Split out of the epoch loop so callers (tests, gradient checker) can
    recompute and compare single steps. Does not apply the update.
    """
    fwd = stream_forward(src_batch, model, training=True, rng=rng_dropout)
    probs = softmax(classify(fwd.H, model.head))
    ce = cross_entropy(probs, src_batch.labels)
    clamps = clamped_count(probs, src_batch.labels)

    level = cfg.adaptation.level
    lam = cfg.adaptation.weight
    if level == "none":
        dist, d_grad = 0.0, None
    else:
        _, a_hat = encode_auxiliary(aux_batch, enc)
        dist, d_grad = adaptation_distance(cfg.adaptation, a_hat, fwd.r_hat)
    loss = total_loss(ce, dist, lam if level != "none" else 0.0)

    dlogits = probs - _onehot(src_batch.labels, model.num_classes)
    head_grads, dH = classify_backward(dlogits, fwd.H, model.head)
    if d_grad is None or lam == 0.0:
        d_rhat = np.zeros_like(fwd.r_hat.descriptors)
    else:
        d_rhat = lam * d_grad
    grads = stream_backward(dH, d_rhat, fwd, model)
    grads.update(head_grads)
    return ce, dist, loss, clamps, grads


def train_stream(model, train_set: MultimodalDataset, enc: AuxiliaryEncoder | None,
                 cfg: TrainConfig, val_set: MultimodalDataset | None = None) -> MetricsHistory:
    """Train a source-stream model; parameters are updated in place.

    Returns the per-step and per-epoch metrics history. The auxiliary
    encoder must be frozen; its checksum is verified around every step.
    """
    level = cfg.adaptation.level
    if level != "none":
        if enc is None:
            raise ConfigError(f"adaptation level {level!r} requires an auxiliary encoder")
        if not enc.frozen:
            raise StateError("train_stream: auxiliary encoder must be frozen")
        if enc.hidden_units != model.hidden_units:
            raise ShapeError("train_stream: auxiliary encoder and model must share hidden units "
                             f"({enc.hidden_units} vs {model.hidden_units}) when adaptation is on")
        check_alignment(level, train_set)

    rng_shuffle = child_rng(cfg.seed, TAG_SHUFFLE)
    rng_aux = child_rng(cfg.seed, TAG_AUX_BATCH)
    rng_dropout = child_rng(cfg.seed, TAG_DROPOUT)
    params = model.param_blocks()
    state = AdamState(params)
    enc_sum = enc.checksum() if enc is not None else None
    history = MetricsHistory()

    n = train_set.source.size
    step_counter = 0
    for epoch in range(cfg.epochs):
        perm = rng_shuffle.permutation(n)
        ep_ce, ep_dist, ep_loss, n_steps = 0.0, 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            src_idx = perm[start:start + cfg.batch_size]
            src_batch = train_set.source.take(src_idx)
            aux_batch = None
            if level != "none":
                aux_batch = _draw_aux_batch(level, train_set, src_idx, rng_aux)
            ce, dist, loss, clamps, grads = train_step(
                model, enc, src_batch, aux_batch, cfg, rng_dropout)
            adam_step(params, grads, state, cfg)
            if enc is not None and enc.checksum() != enc_sum:
                raise StateError("train_stream: frozen auxiliary encoder was modified")
            history.steps.append(StepRecord(epoch, step_counter, ce, dist, loss, clamps))
            ep_ce += ce
            ep_dist += dist
            ep_loss += loss
            n_steps += 1
            step_counter += 1
        train_acc, _ = evaluate_stream(model, train_set.source)
        val_acc = evaluate_stream(model, val_set.source)[0] if val_set is not None else float("nan")
        history.epochs.append(EpochRecord(
            epoch, ep_ce / n_steps, ep_dist / n_steps, ep_loss / n_steps,
            train_acc, val_acc, _shuffle_digest(perm)))
    return history


def _train_single_layer(data: SequenceBatch, hidden_units: int, cfg: TrainConfig):
    """Fit a one-layer LSTM plus classifier head by summed cross-entropy."""
    rng_init = child_rng(cfg.seed, TAG_PRETRAIN, TAG_INIT)
    rng_shuffle = child_rng(cfg.seed, TAG_PRETRAIN, TAG_SHUFFLE)
    rng_dropout = child_rng(cfg.seed, TAG_PRETRAIN, TAG_DROPOUT)
    lstm = init_lstm_params(data.feature_dim, hidden_units, rng_init)
    head = init_head(hidden_units, data.num_classes, rng_init)
    params = {f"lstm.{k}": v for k, v in lstm.blocks().items()}
    params["head.W"] = head.W
    params["head.b"] = head.b
    state = AdamState(params)

    n = data.size
    for _ in range(cfg.epochs):
        perm = rng_shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.take(perm[start:start + cfg.batch_size])
            H, cache = lstm_sequence_forward(batch.features, lstm)
            H_d, mask = dropout_forward(H, cfg.dropout_rate, rng_dropout, training=True)
            probs = softmax(classify(H_d, head))
            dlogits = probs - _onehot(batch.labels, batch.num_classes)
            head_grads, dH = classify_backward(dlogits, H_d, head)
            lstm_grads, _ = lstm_backward(dH * mask, cache, lstm)
            grads = {f"lstm.{k}": v for k, v in lstm_grads.blocks().items()}
            grads.update(head_grads)
            adam_step(params, grads, state, cfg)
    return lstm, head


def _single_layer_accuracy(lstm: LstmParams, head, batch: SequenceBatch) -> float:
    H, _ = lstm_sequence_forward(batch.features, lstm)
    return float((predict(softmax(classify(H, head))) == batch.labels).mean())


def pretrain_auxiliary(aux_data: SequenceBatch, hidden_units: int, cfg: TrainConfig) -> AuxiliaryEncoder:
    """Train a single-layer LSTM on auxiliary classification, then freeze it.

    A temporary classifier head drives the cross-entropy; it is discarded,
    only the recurrent encoder survives. The classification train accuracy
    reached just before the head is dropped is recorded on the encoder.
    """
    if len(set(aux_data.labels.tolist())) < 2:
        raise ConfigError("pretrain_auxiliary: need at least 2 classes")
    lstm, head = _train_single_layer(aux_data, hidden_units, cfg)
    enc = AuxiliaryEncoder(lstm=lstm,
                          pretrain_accuracy=_single_layer_accuracy(lstm, head, aux_data))
    enc.freeze()
    return enc


def single_layer_probe(train_data: SequenceBatch, eval_data: SequenceBatch,
                       hidden_units: int, cfg: TrainConfig) -> float:
    """Held-out accuracy of a one-layer LSTM classifier.

    The capacity-matched probe used to compare how learnable the two
    modalities are (the auxiliary stream should be the easy one).
    """
    lstm, head = _train_single_layer(train_data, hidden_units, cfg)
    return _single_layer_accuracy(lstm, head, eval_data)


@dataclass
class SweepEntry:
    lam: float
    val_accuracy: float
    history: MetricsHistory
    model: object


@dataclass
class SweepResult:
    entries: list
    selected: SweepEntry

    @property
    def selected_lambda(self) -> float:
        return self.selected.lam


def _init_model(kind: str, input_dim: int, hidden_units: int, num_classes: int,
                cfg: TrainConfig, rng: np.random.Generator):
    if kind == "res_lstm":
        return init_res_lstm(input_dim, hidden_units, num_classes, rng, cfg.dropout_rate)
    if kind == "v_lstm":
        return init_v_lstm(input_dim, hidden_units, num_classes, rng, cfg.dropout_rate)
    raise ConfigError(f"unknown model kind {kind!r}")


def new_model(kind: str, input_dim: int, hidden_units: int, num_classes: int,
              cfg: TrainConfig):
    """Seeded model construction; identical seeds give identical parameters."""
    return _init_model(kind, input_dim, hidden_units, num_classes, cfg,
                       child_rng(cfg.seed, TAG_INIT))


@dataclass
class ProbeConfig:
    """Tiny configuration for finite-difference gradient checking."""

    seq_len: int = 4
    batch: int = 6
    input_dim: int = 5
    hidden_units: int = 8
    num_classes: int = 3
    aux_dim: int = 5
    seed: int = 0
    fd_step: float = 1e-5
    weight: float = 0.7
    joint_weights: tuple = (0.4, 0.3, 0.3)

    def __post_init__(self):
        if self.seq_len > 6 or self.batch > 8 or self.hidden_units > 8 or self.num_classes > 4:
            raise ConfigError("ProbeConfig: probe must stay tiny (T<=6, B<=8, N<=8, C<=4)")


@dataclass
class GradCheckReport:
    model_kind: str
    level: str
    max_relative_error: float
    blocks: dict  # block name -> max relative error


# Relative error uses a two-term denominator: entries whose combined
# magnitude falls below this floor are effectively compared absolutely
# (|a - n| <= floor * tol), which keeps finite-difference roundoff on
# near-zero gradients from masquerading as errors.
REL_ERR_FLOOR = 1e-4


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), REL_ERR_FLOOR)
    return np.abs(analytic - numeric) / denom


def gradient_check(model_kind: str = "res_lstm", level: str = "sample",
                   probe: ProbeConfig | None = None) -> GradCheckReport:
    """Compare analytic gradients of the full objective against central
    finite differences, for every trainable parameter entry.

    Dropout is disabled throughout. The auxiliary descriptors come from a
    frozen random encoder and are constants of the objective.
    """
    probe = probe or ProbeConfig()
    cfg = TrainConfig(dropout_rate=0.0, batch_size=probe.batch, epochs=0, seed=probe.seed)
    model = _init_model(model_kind, probe.input_dim, probe.hidden_units,
                        probe.num_classes, cfg, child_rng(probe.seed, TAG_INIT))
    rng_data = child_rng(probe.seed, TAG_SHUFFLE)
    labels = np.arange(probe.batch, dtype=np.int64) % probe.num_classes
    src_batch = SequenceBatch(
        rng_data.normal(size=(probe.batch, probe.seq_len, probe.input_dim)), labels, probe.num_classes)
    enc = AuxiliaryEncoder(init_lstm_params(probe.aux_dim, probe.hidden_units,
                                            child_rng(probe.seed, TAG_PRETRAIN)))
    enc.freeze()
    aux_batch = SequenceBatch(
        rng_data.normal(size=(probe.batch, probe.seq_len, probe.aux_dim)), labels.copy(), probe.num_classes)
    _, a_hat = encode_auxiliary(aux_batch, enc)

    if level == "none":
        acfg = AdaptationConfig("none", 0.0)
    elif level == "joint":
        acfg = AdaptationConfig("joint", probe.weight, probe.joint_weights)
    else:
        acfg = AdaptationConfig(level, probe.weight)

    def objective() -> float:
        fwd = stream_forward(src_batch, model, training=False)
        ce = cross_entropy(softmax(classify(fwd.H, model.head)), labels)
        if acfg.level == "none":
            return ce
        d, _ = adaptation_distance(acfg, a_hat, fwd.r_hat)
        return total_loss(ce, d, acfg.weight)

    # Analytic gradients of the same objective.
    fwd = stream_forward(src_batch, model, training=False)
    probs = softmax(classify(fwd.H, model.head))
    dlogits = probs - _onehot(labels, probe.num_classes)
    head_grads, dH = classify_backward(dlogits, fwd.H, model.head)
    if acfg.level == "none":
        d_rhat = np.zeros_like(fwd.r_hat.descriptors)
    else:
        _, d_grad = adaptation_distance(acfg, a_hat, fwd.r_hat)
        d_rhat = acfg.weight * d_grad
    analytic = stream_backward(dH, d_rhat, fwd, model)
    analytic.update(head_grads)

    h = probe.fd_step
    blocks = {}
    for name, theta in model.param_blocks().items():
        flat = theta.reshape(-1)
        numeric = np.empty(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = objective()
            flat[i] = orig - h
            f_minus = objective()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        blocks[name] = float(_relative_error(analytic[name].reshape(-1), numeric).max())
    return GradCheckReport(model_kind=model_kind, level=level,
                           max_relative_error=max(blocks.values()), blocks=blocks)


def sweep_lambda(base_cfg: TrainConfig, lambda_grid, model_kind: str, hidden_units: int,
                 train_set: MultimodalDataset, enc: AuxiliaryEncoder | None,
                 val_set: MultimodalDataset | None = None) -> SweepResult:
    """Train one model per weight, select by validation accuracy.

    Duplicates in the grid are collapsed. Every run starts from the same
    seeded initialization, so the weight is the only difference between
    entries. Ties select the smaller weight. Without an explicit validation
    set, a seeded 90/10 split of the training pool is used.
    """
    grid = sorted(set(float(l) for l in lambda_grid))
    if not grid:
        raise ConfigError("sweep_lambda: empty grid")
    if val_set is None:
        train_set, val_set, _ = split(train_set, (0.9, 0.1, 0.0),
                                      seed=int(child_rng(base_cfg.seed, TAG_SWEEP).integers(2 ** 63)))
    entries = []
    for lam in grid:
        cfg = replace(base_cfg, adaptation=replace(base_cfg.adaptation, weight=lam))
        model = new_model(model_kind, train_set.source.feature_dim, hidden_units,
                          train_set.source.num_classes, cfg)
        history = train_stream(model, train_set, enc, cfg, val_set=val_set)
        val_acc, _ = evaluate_stream(model, val_set.source)
        entries.append(SweepEntry(lam=lam, val_accuracy=val_acc, history=history, model=model))
    best = max(entries, key=lambda e: (e.val_accuracy, -e.lam))
    return SweepResult(entries=entries, selected=best)
