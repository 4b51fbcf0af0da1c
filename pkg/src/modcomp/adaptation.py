"""Distribution-alignment distances between source and auxiliary descriptors.

Three levels, ordered by how much alignment the training data must provide:

* domain: squared MMD between whole batches (no alignment needed),
* category: mean of per-class squared MMDs (shared label space needed),
* sample: mean squared Euclidean distance over index-aligned pairs.

All distances use the linear kernel k(x, y) = x.y, under which the biased
(self-pair included) squared-MMD V-statistic reduces to the squared distance
between batch means. Gradients are returned with respect to the source
descriptors only; the auxiliary stream is produced by a frozen encoder and
never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateBatchError,
    EmptyInputError,
    PairingError,
    ShapeError,
)
from .linalg import contract

LEVELS = ("none", "domain", "category", "sample", "joint")


@dataclass
class DescriptorBatch:
    """Per-sequence temporal-mean descriptors with class labels."""

    descriptors: np.ndarray  # (n, N)
    labels: np.ndarray       # (n,)
    modality: str            # "source" | "auxiliary"

    def __post_init__(self):
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.descriptors.ndim != 2:
            raise ShapeError(f"DescriptorBatch: expected (n, N), got {self.descriptors.shape}")
        if self.labels.shape != (self.descriptors.shape[0],):
            raise ShapeError("DescriptorBatch: one label per descriptor required")
        if self.modality not in ("source", "auxiliary"):
            raise ValueError(f"DescriptorBatch: unknown modality {self.modality!r}")

    @property
    def size(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class AdaptationConfig:
    """Adaptation level plus the loss weight(s).

    `weight` is the multiplier on the adaptation term in the combined
    objective. For level "joint", `joint_weights` gives the per-level
    (domain, category, sample) weights inside the combined distance and
    `weight` stays an overall multiplier (normally 1.0).
    """

    level: str = "none"
    weight: float = 0.0
    joint_weights: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"adaptation level must be one of {LEVELS}, got {self.level!r}")
        if self.weight < 0:
            raise ConfigError(f"adaptation weight must be >= 0, got {self.weight}")
        if self.level == "joint":
            if self.joint_weights is None:
                raise ConfigError("level 'joint' requires joint_weights (domain, category, sample)")
            self.joint_weights = tuple(float(w) for w in self.joint_weights)
            if len(self.joint_weights) != 3 or any(w < 0 for w in self.joint_weights):
                raise ConfigError("joint_weights must be three non-negative reals")
        elif self.joint_weights is not None:
            raise ConfigError("joint_weights only valid for level 'joint'")


def linear_kernel(x, y) -> float:
    """Dot product; the kernel used by every distance here."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"linear_kernel: incompatible shapes {x.shape}, {y.shape}")
    return float(contract("n,n->", x, y))


def mmd_squared(X, Y, kernel=linear_kernel) -> float:
    """Biased squared-MMD V-statistic between two sample sets.

    Literal double-sum transcription (self-pairs included), kept naive on
    purpose: it is the readable reference form, and the vectorized paths in
    the distance functions are checked against it.
    """
    X = [np.asarray(x, dtype=np.float64) for x in X]
    Y = [np.asarray(y, dtype=np.float64) for y in Y]
    mx, my = len(X), len(Y)
    if mx == 0 or my == 0:
        raise EmptyInputError("mmd_squared: empty sample set")
    term_xx = sum(kernel(xi, xj) for xi in X for xj in X) / (mx * mx)
    term_yy = sum(kernel(yi, yj) for yi in Y for yj in Y) / (my * my)
    term_xy = sum(kernel(xi, yj) for xi in X for yj in Y) / (mx * my)
    return term_xx + term_yy - 2.0 * term_xy


def _check_pair(aux: DescriptorBatch, src: DescriptorBatch):
    if aux.size == 0 or src.size == 0:
        raise EmptyInputError("distance: empty descriptor batch")
    if aux.dim != src.dim:
        raise ShapeError(f"distance: descriptor dims differ, {aux.dim} vs {src.dim}")


def _mmd_linear_terms(a: np.ndarray, r: np.ndarray):
    """V-statistic of the linear-kernel MMD^2 via summed-vector dots.

    For the linear kernel the double sums collapse:
    sum_ij x_i.x_j = (sum_i x_i).(sum_j x_j). Returns (value, grad wrt each
    row of r, constant across rows). Generalizes the equal-size batch form
    to m != n by normalizing each double sum with its own batch sizes.
    """
    m, n = a.shape[0], r.shape[0]
    sa = a.sum(axis=0)
    sr = r.sum(axis=0)
    d = (
        float(contract("n,n->", sa, sa)) / (m * m)
        + float(contract("n,n->", sr, sr)) / (n * n)
        - 2.0 * float(contract("n,n->", sa, sr)) / (m * n)
    )
    grad_row = (2.0 / (n * n)) * sr - (2.0 / (m * n)) * sa
    # Roundoff in the three-term form can land a hair below zero when the
    # batches nearly coincide; the exact value is a squared norm.
    return max(d, 0.0), grad_row


def domain_distance(aux: DescriptorBatch, src: DescriptorBatch):
    """Whole-batch squared MMD and its gradient w.r.t. source descriptors."""
    _check_pair(aux, src)
    d, grad_row = _mmd_linear_terms(aux.descriptors, src.descriptors)
    grad = np.tile(grad_row, (src.size, 1))
    return d, grad


def category_distance(aux: DescriptorBatch, src: DescriptorBatch):
    """Mean per-class squared MMD over classes present in both modalities.

    Classes missing from either modality in the batch carry no evidence and
    are excluded; the mean is renormalized by the number of classes kept.
    """
    _check_pair(aux, src)
    shared = sorted(set(aux.labels.tolist()) & set(src.labels.tolist()))
    if not shared:
        raise DegenerateBatchError("category_distance: no class present in both modalities")
    total = 0.0
    grad = np.zeros_like(src.descriptors)
    for c in shared:
        a_rows = aux.descriptors[aux.labels == c]
        r_mask = src.labels == c
        d_c, grad_row = _mmd_linear_terms(a_rows, src.descriptors[r_mask])
        total += d_c
        grad[r_mask] = grad_row
    k = len(shared)
    return total / k, grad / k


def sample_distance(aux: DescriptorBatch, src: DescriptorBatch):
    """Mean squared Euclidean distance over index-aligned descriptor pairs."""
    _check_pair(aux, src)
    if aux.size != src.size:
        raise PairingError(f"sample_distance: batch sizes differ, {aux.size} vs {src.size}")
    n = src.size
    diff = src.descriptors - aux.descriptors
    d = float(contract("nk,nk->", diff, diff)) / n
    grad = (2.0 / n) * diff
    return d, grad


def joint_distance(aux: DescriptorBatch, src: DescriptorBatch, weights):
    """Weighted sum of the three distances; gradient is the weighted sum."""
    w_dom, w_cat, w_smp = (float(w) for w in weights)
    total = 0.0
    grad = np.zeros_like(src.descriptors)
    for w, fn in ((w_dom, domain_distance), (w_cat, category_distance), (w_smp, sample_distance)):
        if w == 0.0:
            continue
        d, g = fn(aux, src)
        total += w * d
        grad += w * g
    return total, grad


def adaptation_distance(cfg: AdaptationConfig, aux: DescriptorBatch, src: DescriptorBatch):
    """Dispatch on the configured level; level "none" contributes nothing."""
    if cfg.level == "none":
        return 0.0, np.zeros_like(src.descriptors)
    if cfg.level == "domain":
        return domain_distance(aux, src)
    if cfg.level == "category":
        return category_distance(aux, src)
    if cfg.level == "sample":
        return sample_distance(aux, src)
    return joint_distance(aux, src, cfg.joint_weights)
