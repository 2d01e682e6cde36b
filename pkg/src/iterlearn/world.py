"""Synthetic compositional world: attribute-value objects rendered as noisy
patch sets ("images") and one-token-per-attribute sequences ("texts")."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NegativeMiningError, SamplingError
from .nn import DTYPE

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldSpec:
    num_attributes: int = 3
    values_per_attribute: int = 5
    patch_dim: int = 32
    noise_sigma: float = 0.1
    distractor_patches: int = 1
    seed: int = 0
    shuffle_tokens: bool = False

    def __post_init__(self):
        if self.num_attributes < 1:
            raise ConfigError(f"num_attributes must be >= 1, got {self.num_attributes}")
        if self.values_per_attribute < 2:
            raise ConfigError(f"values_per_attribute must be >= 2, got {self.values_per_attribute}")
        if self.patch_dim < 1 or self.noise_sigma < 0 or self.distractor_patches < 0:
            raise ConfigError("patch_dim >= 1, noise_sigma >= 0, distractor_patches >= 0 required")

    @property
    def vocab_size(self) -> int:
        return self.num_attributes * self.values_per_attribute

    @property
    def num_meanings(self) -> int:
        return self.values_per_attribute**self.num_attributes

    @property
    def num_patches(self) -> int:
        return self.num_attributes + self.distractor_patches


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    attr_embeddings: np.ndarray  # [A, V, D_in], unit rows


@dataclass
class Batch:
    meanings: np.ndarray  # [N, A] int
    image_patches: np.ndarray  # [N, P, D_in]
    text_tokens: np.ndarray  # [N, A] int

    def __len__(self):
        return len(self.meanings)


def make_world(spec: WorldSpec) -> World:
    rng = np.random.default_rng(spec.seed)
    emb = rng.standard_normal((spec.num_attributes, spec.values_per_attribute, spec.patch_dim))
    emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
    emb = emb.astype(DTYPE)
    emb.setflags(write=False)
    return World(spec, emb)


def index_to_meaning(idx, spec: WorldSpec) -> np.ndarray:
    """Mixed-radix decode; attribute 0 is the most significant digit."""
    idx = np.asarray(idx)
    V, A = spec.values_per_attribute, spec.num_attributes
    digits = [(idx // V ** (A - 1 - j)) % V for j in range(A)]
    return np.stack(digits, axis=-1).astype(np.int64)


def all_meanings(spec: WorldSpec) -> np.ndarray:
    return index_to_meaning(np.arange(spec.num_meanings), spec)


def meanings_to_tokens(meanings, spec: WorldSpec) -> np.ndarray:
    meanings = np.asarray(meanings, dtype=np.int64)
    return meanings + spec.values_per_attribute * np.arange(spec.num_attributes)


def tokens_to_meanings(tokens, spec: WorldSpec) -> np.ndarray:
    """Inverse of ``meanings_to_tokens``; accepts any token order."""
    tokens = np.asarray(tokens, dtype=np.int64)
    attr, val = np.divmod(tokens, spec.values_per_attribute)
    out = np.empty_like(tokens)
    np.put_along_axis(out, attr, val, axis=-1)
    return out


def render_images(world: World, meanings, rng=None) -> np.ndarray:
    """Patch sets for ``meanings``. With ``rng=None`` the rendering is noiseless,
    distractor-free and unpermuted."""
    spec = world.spec
    meanings = np.asarray(meanings, dtype=np.int64)
    A = spec.num_attributes
    obj = world.attr_embeddings[np.arange(A), meanings]  # [N, A, D]
    if rng is None:
        return obj.astype(DTYPE)
    N, D = len(meanings), spec.patch_dim
    sigma = spec.noise_sigma
    distract = np.zeros((N, spec.distractor_patches, D))
    patches = np.concatenate([obj, distract], axis=1)
    patches = patches + sigma * rng.standard_normal(patches.shape)
    perm = np.argsort(rng.random((N, spec.num_patches)), axis=1)
    patches = np.take_along_axis(patches, perm[..., None], axis=1)
    return patches.astype(DTYPE)


def sample_batch(world: World, N: int, rng_seed) -> Batch:
    spec = world.spec
    if N > spec.num_meanings:
        raise SamplingError(f"batch of {N} exceeds the {spec.num_meanings} distinct meanings")
    if N < 1:
        raise SamplingError(f"batch size must be positive, got {N}")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(spec.num_meanings, size=N, replace=False)
    meanings = index_to_meaning(idx, spec)
    patches = render_images(world, meanings, rng)
    tokens = meanings_to_tokens(meanings, spec)
    if spec.shuffle_tokens:
        tokens = rng.permuted(tokens, axis=1)
    return Batch(meanings, patches, tokens)


def meaning_distance(a, b) -> int:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ConfigError(f"meaning lengths differ: {a.shape} vs {b.shape}")
    return int(np.sum(a != b))


def hard_negative_text(tokens, rng: np.random.Generator, values_per_attribute: int | None = None,
                       positions=None):
    """Swap two distinct positions of a token sequence.

    With ``values_per_attribute`` set, the *values* carried by the two slots are
    exchanged while each slot keeps its attribute offset (so a fixed-order text
    describes a different object). Otherwise the raw tokens are swapped.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] < 2:
        raise NegativeMiningError(f"need at least 2 tokens to swap, got {tokens.shape[-1]}")
    if positions is None:
        i, j = rng.choice(tokens.shape[-1], size=2, replace=False)
    else:
        i, j = positions
    out = tokens.copy()
    if values_per_attribute is None:
        out[..., i], out[..., j] = tokens[..., j], tokens[..., i]
    else:
        V = values_per_attribute
        out[..., i] = tokens[..., i] - tokens[..., i] % V + tokens[..., j] % V
        out[..., j] = tokens[..., j] - tokens[..., j] % V + tokens[..., i] % V
    if np.array_equal(out, tokens):
        log.debug("hard negative identical to its source: %s", tokens.tolist())
    return out


def hard_negative_batch(tokens, rng: np.random.Generator, values_per_attribute: int | None = None):
    return np.stack([hard_negative_text(t, rng, values_per_attribute) for t in tokens])
