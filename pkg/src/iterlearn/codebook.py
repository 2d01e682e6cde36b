"""Shared codebook: max-cosine relevance, sparsemax weights and convex pooling.

Both agents describe their input as a sparse convex combination of the
same codes. ``readout`` is the differentiable composition used in training;
the plain-numpy functions here are the single-example reference forms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import sparsemax_last
from .errors import ConfigError
from .nn import DTYPE

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    codes: np.ndarray  # [C, D]
    frozen: bool = False

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] < 2:
            raise ConfigError(f"codebook needs shape [C>=2, D], got {self.codes.shape}")

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]


def init_codebook(C: int, D: int, seed: int) -> Codebook:
    rng = np.random.default_rng(seed)
    return Codebook((rng.standard_normal((C, D)) / math.sqrt(D)).astype(DTYPE))


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = n[..., 0] == 0
    if np.any(zero):
        log.debug("zero-norm rows in relevance input: %d", int(zero.sum()))
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def relevance(patch_embs, codes) -> np.ndarray:
    """r_i = max_j cos(patch_j, code_i). Zero-norm rows contribute cosine 0."""
    patch_embs, codes = np.asarray(patch_embs), np.asarray(codes)
    if patch_embs.shape[-1] != codes.shape[-1]:
        raise ConfigError(f"patch dim {patch_embs.shape[-1]} != code dim {codes.shape[-1]}")
    sims = _unit_rows(patch_embs) @ _unit_rows(codes).T
    return sims.max(axis=-2)


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex (last axis)."""
    z = np.asarray(z)
    if not z.dtype.kind == "f":
        z = z.astype(np.float64)
    return sparsemax_last(z)


def sparsemax_jacobian(z) -> np.ndarray:
    """dp/dz = diag(s) - s sᵀ / |S| on the current support ``s``."""
    s = (sparsemax(np.asarray(z, dtype=np.float64)) > 0).astype(np.float64)
    return np.diag(s) - np.outer(s, s) / s.sum()


def pool(w, codes) -> np.ndarray:
    w, codes = np.asarray(w), np.asarray(codes)
    if w.shape[-1] != codes.shape[0]:
        raise ConfigError(f"weights over {w.shape[-1]} codes, codebook has {codes.shape[0]}")
    return w @ codes


def readout(feats, codes):
    """Tape composition relevance -> sparsemax -> pool.

    ``feats`` is ``[N, P, D]`` (per-patch or per-token features), ``codes``
    ``[C, D]``. Returns ``(reps [N, D], weights [N, C])`` as ``Var``.
    """
    sims = ad.matmul(ad.l2_normalize(feats), ad.transpose(ad.l2_normalize(codes)))
    w = ad.sparsemax(ad.max_axis(sims, axis=-2))
    return ad.matmul(w, codes), w


@dataclass
class CodeUsage:
    mean_weight: np.ndarray
    frequency: np.ndarray
    never_active: int


def code_usage(weights) -> CodeUsage:
    """Per-code mean weight and activation frequency over a stream of weight vectors."""
    w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights)
    w = np.atleast_2d(w)
    if len(w) == 0:
        raise ConfigError("code_usage needs at least one weight vector")
    active = w > 0
    freq = active.mean(axis=0)
    return CodeUsage(w.mean(axis=0), freq, int(np.sum(~active.any(axis=0))))


def top_examples(code_index: int, scores, k: int) -> list[int]:
    """Indices of the ``k`` dataset items with highest relevance to one code.

    ``scores`` is the ``[M, C]`` relevance matrix of the dataset. Ties keep
    dataset order.
    """
    scores = np.asarray(scores)
    if not 0 <= code_index < scores.shape[1]:
        raise ConfigError(f"code index {code_index} out of range [0, {scores.shape[1]})")
    if not 0 < k <= scores.shape[0]:
        raise ConfigError(f"k={k} must be in [1, {scores.shape[0]}]")
    order = np.argsort(-scores[:, code_index], kind="stable")
    return order[:k].tolist()
