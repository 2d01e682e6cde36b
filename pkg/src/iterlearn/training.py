"""Losses, spectral regularization and the single optimizer step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agents import AgentParams, encode_batch, encode_var
from .codebook import Codebook
from .errors import ConfigError, NumericError
from .nn import AdamWState, adamw_step, power_iteration
from .world import Batch

PHASE_TAGS = ("Warmup", "Distill", "Interact", "FinalInteract")


@dataclass(frozen=True)
class Phase:
    tag: str
    generation: int

    def __post_init__(self):
        if self.tag not in PHASE_TAGS:
            raise ConfigError(f"unknown phase tag {self.tag!r}")


@dataclass
class TrainHyper:
    tau: float = 0.07
    batch_size: int = 64
    distill_weight: float = 1.0
    distill_mode: str = "cosine"  # or "logit_kl"
    distill_contrastive: bool = True
    hard_negatives: bool = False
    spectral_reg: bool = False
    spectral_iters: int = 5
    symmetric_loss: bool = True
    base_lr: float = 5e-4
    warmup_steps: int = 50
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be >= 0")
        if self.distill_mode not in ("cosine", "logit_kl"):
            raise ConfigError(f"distill_mode must be cosine or logit_kl, got {self.distill_mode!r}")
        if self.base_lr <= 0 or self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr > 0, warmup_steps >= 0, weight_decay >= 0 required")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.spectral_iters < 1:
            raise ConfigError("spectral_iters must be >= 1")


@dataclass
class LossBreakdown:
    total: float
    i2t: float
    t2i: float
    distill: float = 0.0
    reg: float = 0.0

    @property
    def contrastive(self):
        return 0.5 * (self.i2t + self.t2i)


@dataclass
class TrainState:
    step: int
    phase: Phase
    vision: AgentParams
    language: AgentParams
    codebook: Codebook
    opt: dict = field(default_factory=dict)
    teacher: AgentParams | None = None
    teacher_role: str | None = None
    spectral_vectors: dict = field(default_factory=dict)
    spawn_history: list = field(default_factory=list)

    def agent(self, role: str) -> AgentParams:
        return self.vision if role == "vision" else self.language

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for role in ("vision", "language"):
            for k, v in self.agent(role).named_parameters().items():
                out[f"{role}.{k}"] = v
        out["codebook.codes"] = self.codebook.codes
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        role, rest = name.split(".", 1)
        if role == "codebook":
            self.codebook.codes = value
        else:
            self.agent(role).set_parameter(rest, value)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.named_parameters().values())


# -- losses ------------------------------------------------------------------

def contrastive_terms(img, txt, tau, neg_txt=None):
    """In-batch InfoNCE on cosine logits. Returns ``(i2t, t2i)`` as ``Var``."""
    fi = ad.l2_normalize(img)
    gt = ad.l2_normalize(txt)
    inv_tau = np.asarray(1.0 / tau, dtype=fi.value.dtype)
    logits = ad.mul(ad.matmul(fi, ad.transpose(gt)), inv_tau)
    pos = ad.diag(logits)
    row_logits = logits
    if neg_txt is not None:
        neg = ad.mul(ad.matmul(fi, ad.transpose(ad.l2_normalize(neg_txt))), inv_tau)
        row_logits = ad.concat([logits, neg], axis=1)
    i2t = ad.mean(ad.sub(ad.logsumexp(row_logits, axis=1), pos))
    t2i = ad.mean(ad.sub(ad.logsumexp(logits, axis=0), pos))
    return i2t, t2i


def _check_reps(*reps):
    for r in reps:
        if not np.all(np.isfinite(np.asarray(r))):
            raise NumericError("non-finite representation")


def contrastive_loss(img_reps, txt_reps, tau=0.07, symmetric=True) -> LossBreakdown:
    img_reps, txt_reps = np.asarray(img_reps), np.asarray(txt_reps)
    if img_reps.shape != txt_reps.shape:
        raise ConfigError(f"rep shapes differ: {img_reps.shape} vs {txt_reps.shape}")
    if img_reps.shape[0] < 2:
        raise ConfigError("contrastive loss needs N >= 2")
    _check_reps(img_reps, txt_reps)
    i2t, t2i = contrastive_terms(img_reps, txt_reps, tau)
    i2t, t2i = float(i2t.value), float(t2i.value)
    return LossBreakdown(0.5 * (i2t + t2i) if symmetric else i2t, i2t, t2i)


def hard_negative_contrastive(img_reps, txt_reps, neg_txt_reps, tau=0.07) -> float:
    """Image-to-text loss with the swapped texts appended to every row's denominator."""
    img_reps, txt_reps, neg_txt_reps = map(np.asarray, (img_reps, txt_reps, neg_txt_reps))
    if neg_txt_reps.shape != txt_reps.shape or img_reps.shape != txt_reps.shape:
        raise ConfigError("hard negatives must align 1:1 with the text batch")
    _check_reps(img_reps, txt_reps, neg_txt_reps)
    i2t, _ = contrastive_terms(img_reps, txt_reps, tau, neg_txt=neg_txt_reps)
    return float(i2t.value)


def distill_terms(student, teacher):
    s = ad.l2_normalize(student)
    t = ad.l2_normalize(ad.const(teacher))
    cos = ad.sum_axis(ad.mul(s, t), axis=-1)
    return ad.sub(1.0, ad.mean(cos))


def distill_kl_terms(student, teacher, other, tau):
    """KL(teacher || student) over in-batch similarity rows against ``other``.

    ``other`` is the partner modality's representations (a ``Var`` or array);
    gradients flow into it as well.
    """
    o = ad.l2_normalize(other if isinstance(other, ad.Var) else ad.const(other))
    inv_tau = np.asarray(1.0 / tau, dtype=o.value.dtype)
    s_logits = ad.mul(ad.matmul(ad.l2_normalize(student), ad.transpose(o)), inv_tau)
    t_logits = ad.mul(ad.matmul(ad.l2_normalize(ad.const(teacher)), ad.transpose(o)), inv_tau)
    # KL = sum_j pt_j (log pt_j - log ps_j)
    log_pt = ad.sub(t_logits, ad.logsumexp(t_logits, axis=1, keepdims=True))
    log_ps = ad.sub(s_logits, ad.logsumexp(s_logits, axis=1, keepdims=True))
    pt = ad.exp(log_pt)
    return ad.mean(ad.sum_axis(ad.mul(pt, ad.sub(log_pt, log_ps)), axis=1))


def distill_loss(student_reps, teacher_reps) -> float:
    """Mean cosine distance between student and teacher representations."""
    student_reps, teacher_reps = np.asarray(student_reps), np.asarray(teacher_reps)
    if student_reps.shape != teacher_reps.shape:
        raise ConfigError(f"shapes differ: {student_reps.shape} vs {teacher_reps.shape}")
    _check_reps(student_reps, teacher_reps)
    for r in (student_reps, teacher_reps):
        if np.any(np.linalg.norm(r, axis=-1) == 0):
            raise NumericError("zero-norm representation in distillation")
    return float(distill_terms(student_reps, teacher_reps).value)


# -- spectral regularization ----------------------------------------------------

def spectral_regularize(layers, vectors: dict, iters: int = 5, prefix: str = "", seed: int = 0):
    """Rescale each layer's W in place so its estimated top singular value is <= 1.

    ``vectors`` holds the persistent power-iteration start vector per layer
    and is updated in place.
    """
    for i, layer in enumerate(layers):
        key = f"{prefix}layers.{i}.W"
        v = vectors.get(key)
        if v is None:
            v = np.random.default_rng([seed, i]).standard_normal(layer.W.shape[1])
            v /= np.linalg.norm(v)
        est, v = power_iteration(layer.W, v, iters)
        vectors[key] = v
        sigma = est[-1]
        if sigma > 1.0:
            layer.W = (layer.W / sigma).astype(layer.W.dtype)


# -- train step ------------------------------------------------------------------

def batch_loss(pv, state: TrainState, batch: Batch, hyper: TrainHyper, *, use_codebook=True,
               neg_tokens=None, teacher_reps=None):
    """Tape loss for one batch. ``pv`` maps full parameter names to ``Var``."""
    def sub(role):
        p = f"{role}."
        return {k[len(p):]: v for k, v in pv.items() if k.startswith(p)}

    codes = pv["codebook.codes"] if use_codebook else None
    vis, lang = sub("vision"), sub("language")
    img, _ = encode_var(state.vision.arch, vis, codes, batch.image_patches, use_codebook)
    txt, _ = encode_var(state.language.arch, lang, codes, batch.text_tokens, use_codebook)
    neg = None
    if neg_tokens is not None:
        neg, _ = encode_var(state.language.arch, lang, codes, neg_tokens, use_codebook)
    i2t, t2i = contrastive_terms(img, txt, hyper.tau, neg)
    con = ad.mul(ad.add(i2t, t2i), 0.5) if hyper.symmetric_loss else i2t
    parts = {"i2t": i2t, "t2i": t2i}
    distilling = state.phase.tag == "Distill" and teacher_reps is not None
    if not distilling:
        return con, parts
    student = txt if state.teacher_role == "language" else img
    if hyper.distill_mode == "cosine":
        dist = distill_terms(student, teacher_reps)
    else:
        other = img if state.teacher_role == "language" else txt
        dist = distill_kl_terms(student, teacher_reps, other, hyper.tau)
    parts["distill"] = dist
    weighted = ad.mul(dist, np.asarray(hyper.distill_weight, dtype=dist.value.dtype))
    total = ad.add(con, weighted) if hyper.distill_contrastive else weighted
    return total, parts


def teacher_representations(state: TrainState, batch: Batch, use_codebook=True):
    if state.teacher is None:
        return None
    inputs = batch.text_tokens if state.teacher_role == "language" else batch.image_patches
    reps, _ = encode_batch(state.teacher, state.codebook if use_codebook else None, inputs, use_codebook)
    return reps


def train_step(state: TrainState, batch: Batch, hyper: TrainHyper, lr: float, *,
               use_codebook=True, neg_tokens=None, seed=0):
    """Forward, backward and AdamW update on every unfrozen parameter (in place).

    Returns ``(state, LossBreakdown)``.
    """
    params = state.named_parameters()
    trainable = {k: v for k, v in params.items()
                 if not (k.startswith("codebook.") and (state.codebook.frozen or not use_codebook))}
    fixed = {k: ad.const(v) for k, v in params.items() if k not in trainable}
    teacher_reps = teacher_representations(state, batch, use_codebook)
    parts_out = {}

    def loss_fn(leaves):
        total, parts = batch_loss({**fixed, **leaves}, state, batch, hyper, use_codebook=use_codebook,
                                  neg_tokens=neg_tokens, teacher_reps=teacher_reps)
        parts_out.update(parts)
        return total

    total, grads = ad.compute_gradients(trainable, loss_fn, phase=state.phase.tag, step=state.step)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", phase=state.phase.tag, step=state.step)
        s = state.opt.get(name) or AdamWState.zeros_like(params[name])
        new_p, state.opt[name] = adamw_step(params[name], g, s, lr, hyper.betas, hyper.weight_decay)
        state.set_parameter(name, new_p)
    if hyper.spectral_reg:
        for role in ("vision", "language"):
            spectral_regularize(state.agent(role).layers, state.spectral_vectors, hyper.spectral_iters,
                                prefix=f"{role}.", seed=seed)
    losses = LossBreakdown(
        total=total,
        i2t=float(parts_out["i2t"].value),
        t2i=float(parts_out["t2i"].value),
        distill=float(parts_out["distill"].value) if "distill" in parts_out else 0.0,
    )
    state.step += 1
    return state, losses
