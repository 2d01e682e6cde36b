"""Vision and language agents: a shared per-patch (per-token) dense stack
feeding the codebook readout."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, readout
from .errors import ConfigError, DataError
from .nn import DTYPE, dense_var, init_dense


@dataclass(frozen=True)
class AgentArch:
    kind: str  # "vision" | "language"
    input_dim: int
    output_dim: int
    hidden_dims: tuple = (64, 64)
    vocab_size: int = 0

    def __post_init__(self):
        if self.kind not in ("vision", "language"):
            raise ConfigError(f"agent kind must be vision or language, got {self.kind!r}")
        if self.kind == "language" and self.vocab_size < 1:
            raise ConfigError("language agent needs vocab_size >= 1")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all layer widths must be positive")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class AgentParams:
    arch: AgentArch
    layers: list = field(default_factory=list)
    embeddings: np.ndarray | None = None  # [vocab, input_dim], language only

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        if self.embeddings is not None:
            out["embeddings"] = self.embeddings
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.W"] = layer.W
            out[f"layers.{i}.b"] = layer.b
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "embeddings":
            self.embeddings = value
            return
        _, i, attr = name.split(".")
        setattr(self.layers[int(i)], attr, value)

    def copy(self) -> "AgentParams":
        return copy.deepcopy(self)


def init_agent(arch: AgentArch, seed: int) -> AgentParams:
    rng = np.random.default_rng(seed)
    emb = None
    if arch.kind == "language":
        emb = (rng.standard_normal((arch.vocab_size, arch.input_dim)) / math.sqrt(arch.input_dim)).astype(DTYPE)
    widths = arch.widths
    layers = []
    for i, (fi, fo) in enumerate(zip(widths, widths[1:])):
        act = "identity" if i == len(widths) - 2 else "relu"
        layers.append(init_dense(fi, fo, act, rng))
    return AgentParams(arch, layers, emb)


def spawn(p: AgentParams, seed: int) -> AgentParams:
    """A freshly initialized agent with the same architecture."""
    return init_agent(p.arch, seed)


# -- tape forward passes -------------------------------------------------------

def agent_vars(p: AgentParams) -> dict[str, ad.Var]:
    return {k: ad.const(v) for k, v in p.named_parameters().items()}


def features(arch: AgentArch, pv, inputs):
    """Per-patch / per-token features ``[N, P, D]``; ``pv`` maps names to ``Var``."""
    if arch.kind == "language":
        tokens = np.asarray(inputs)
        if tokens.dtype.kind not in "iu":
            raise DataError(f"tokens must be integers, got {tokens.dtype}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= arch.vocab_size):
            raise DataError(f"token ids must lie in [0, {arch.vocab_size})")
        h = ad.take_rows(pv["embeddings"], tokens)
    else:
        x = ad.const(inputs)
        if x.shape[-1] != arch.input_dim:
            raise ConfigError(f"vision agent expects patch dim {arch.input_dim}, got {x.shape[-1]}")
        h = x
    n_layers = len(arch.widths) - 1
    for i in range(n_layers):
        act = "identity" if i == n_layers - 1 else "relu"
        h = dense_var(pv[f"layers.{i}.W"], pv[f"layers.{i}.b"], act, h)
    return h


def encode_var(arch: AgentArch, pv, codes, inputs, use_codebook=True):
    """Batched representations ``[N, D]`` and code weights ``[N, C]`` (or None)."""
    h = features(arch, pv, inputs)
    if not use_codebook:
        return ad.max_axis(h, axis=-2), None
    return readout(h, codes)


def encode_batch(p: AgentParams, cb: Codebook | None, inputs, use_codebook=True):
    """Gradient-free batched encoding; returns numpy ``(reps, weights)``."""
    codes = None if cb is None else ad.const(cb.codes)
    rep, w = encode_var(p.arch, agent_vars(p), codes, inputs, use_codebook and cb is not None)
    return rep.value, (None if w is None else w.value)


def encode_image(p: AgentParams, cb: Codebook, patches):
    if p.arch.kind != "vision":
        raise ConfigError("encode_image needs a vision agent")
    rep, w = encode_batch(p, cb, np.asarray(patches, dtype=DTYPE)[None])
    return rep[0], w[0]


def encode_text(p: AgentParams, cb: Codebook, tokens):
    if p.arch.kind != "language":
        raise ConfigError("encode_text needs a language agent")
    rep, w = encode_batch(p, cb, np.asarray(tokens, dtype=np.int64)[None])
    return rep[0], w[0]


def feature_batch(p: AgentParams, inputs) -> np.ndarray:
    return features(p.arch, agent_vars(p), inputs).value
