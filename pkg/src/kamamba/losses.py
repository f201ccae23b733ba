"""Training losses and the class-transition prior.

``TransitionMatrix`` is the K×K row-stochastic prior over "changes to"
targets, estimated from changed (pre, post) label pairs. ``kat_loss``
compares its bilinear plausibility score ``aᵀ T b`` with the change head's
changed-class probability.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingFault, ValidationError

log = logging.getLogger(__name__)

NUM_CLASSES = 11
DEFAULT_EPS = 1e-3
ROW_TOL = 1e-9


@dataclass
class TransitionMatrix:
    T: np.ndarray  # (K, K) float64, rows sum to 1
    counts: np.ndarray  # (K, K) int64
    eps: float = DEFAULT_EPS
    flagged_rows: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.T.shape[0]

    def validate(self):
        check_stochastic(self.T)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.T, dtype=dtype)

    def save(self, path):
        """Plain text: header ``K=<K> eps=<eps>`` then K rows of K decimals."""
        lines = [f"K={self.K} eps={self.eps!r}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.T]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "TransitionMatrix":
        text = Path(path).read_text().strip().splitlines()
        if not text:
            raise ValidationError(f"{path}: empty transition file")
        try:
            header = dict(part.split("=", 1) for part in text[0].split())
            k, eps = int(header["K"]), float(header["eps"])
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad header {text[0]!r}") from exc
        try:
            rows = [[float(v) for v in line.split()] for line in text[1:]]
        except ValueError as exc:
            raise ValidationError(f"{path}: non-numeric entry ({exc})") from exc
        if len(rows) != k or any(len(r) != k for r in rows):
            raise ValidationError(f"{path}: expected {k} rows of {k} values")
        T = np.array(rows, dtype=np.float64)
        check_stochastic(T)
        return cls(T, np.zeros((k, k), dtype=np.int64), eps)


def check_stochastic(T, tol: float = ROW_TOL):
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValidationError(f"transition matrix must be square, got {T.shape}")
    if not np.isfinite(T).all() or (T < 0).any():
        raise ValidationError("transition matrix has negative or non-finite entries")
    dev = np.abs(T.sum(1) - 1).max()
    if dev > tol:
        raise ValidationError(f"transition matrix rows deviate from 1 by {dev:.3g}")


def transition_counts(pairs, num_classes: int = NUM_CLASSES, include_diagonal: bool = False) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValidationError("build_transition needs at least one label pair")
    if pairs.min() < 0 or pairs.max() >= num_classes:
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    if not include_diagonal:
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (pairs[:, 0], pairs[:, 1]), 1)
    return counts


def build_transition(pairs, num_classes: int = NUM_CLASSES, eps: float = DEFAULT_EPS,
                     include_diagonal: bool = False) -> TransitionMatrix:
    """Row-normalized change counts with additive smoothing ``eps``.

    Only changed pairs (pre != post) count unless ``include_diagonal``.
    Rows with no outgoing transitions come out uniform (needs eps > 0) and
    are listed in ``flagged_rows``.
    """
    if eps < 0:
        raise ValidationError(f"eps must be >= 0, got {eps}")
    counts = transition_counts(pairs, num_classes, include_diagonal)
    totals = counts.sum(1, keepdims=True)
    empty = [int(i) for i in np.flatnonzero(totals[:, 0] == 0)]
    denom = totals + num_classes * eps
    with np.errstate(invalid="ignore", divide="ignore"):
        T = (counts + eps) / denom
    if empty:
        log.info("transition rows with no outgoing changes: %s", empty)
        if eps == 0:
            T[empty] = 1.0 / num_classes
    return TransitionMatrix(T, counts, eps, empty)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def change_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Two-way softmax cross-entropy; ``labels`` are 0 (unchanged) / 1 (changed)."""
    return F.cross_entropy(logits, labels.long())


def contrastive_loss(pre: torch.Tensor, post: torch.Tensor, align: torch.Tensor, tau: float = 0.1,
                     return_flag: bool = False):
    """Cross-year InfoNCE over L2-normalized prediction vectors.

    Row i scores ``pre_i`` against every ``post_j``; the positive is j = i and
    only rows with ``align[i]`` (unchanged samples) contribute. Changed
    samples still appear as negatives. No unchanged rows -> 0, flagged.
    """
    align = align.bool()
    if not bool(align.any()):
        zero = pre.sum() * 0.0
        return (zero, True) if return_flag else zero
    sim = pre @ post.T / tau
    nll = torch.logsumexp(sim, dim=1) - sim.diagonal()
    loss = nll[align].mean()
    return (loss, False) if return_flag else loss


def plausibility(pre_probs: torch.Tensor, post_probs: torch.Tensor, T: torch.Tensor) -> torch.Tensor:
    """``Ĉ = aᵀ T b`` per batch row."""
    return torch.einsum("bi,ij,bj->b", pre_probs, T.to(pre_probs.dtype), post_probs)


def kat_loss(pre_probs, post_probs, change_prob, T) -> torch.Tensor:
    if isinstance(T, TransitionMatrix):
        T = T.tensor(pre_probs.dtype)
    check_stochastic(T.detach().cpu().numpy(), tol=1e-5 if T.dtype == torch.float32 else ROW_TOL)
    c_hat = plausibility(pre_probs, post_probs, T)
    return ((c_hat - change_prob) ** 2).mean()


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    lambda_cl: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0 or not math.isfinite(value):
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {value}")


def total_loss(parts: dict, w: LossWeights) -> torch.Tensor:
    """``α(cls_pre + cls_post) + β·change + λ·cl + γ·kat``; NaN parts raise."""
    for name, value in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise TrainingFault(f"loss.{name}", "non-finite loss part")
    return (
        w.alpha * (parts["cls_pre"] + parts["cls_post"])
        + w.beta * parts["change"]
        + w.lambda_cl * parts["cl"]
        + w.gamma * parts["kat"]
    )
