"""Diagnostics: in-batch retrieval, topographic similarity, a Lipschitz upper
bound and the ease-of-learning probe."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .agents import AgentArch, AgentParams, encode_batch, encode_var, init_agent
from .codebook import Codebook, code_usage
from .errors import NumericError
from .nn import AdamWState, adamw_step, spectral_norm
from .training import contrastive_terms
from .world import World, all_meanings, render_images, sample_batch

CSV_HEADER = ("step,generation,phase,lr,loss_total,loss_i2t,loss_t2i,loss_distill,"
              "r1_i2t,r1_t2i,lips_vision,lips_language,topo_sim,active_codes").split(",")


@dataclass
class MetricsRecord:
    step: int
    generation: int
    phase: str
    lr: float
    loss_total: float
    loss_i2t: float
    loss_t2i: float
    loss_distill: float
    r1_i2t: float
    r1_t2i: float
    lips_vision: float
    lips_language: float
    topo_sim: float
    active_codes: int

    @property
    def loss_contrastive(self):
        return 0.5 * (self.loss_i2t + self.loss_t2i)


class MetricsWriter:
    def __init__(self, path):
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._csv = csv.writer(self._fh, lineterminator="\n")
            self._csv.writerow(CSV_HEADER)

    def write(self, rec: MetricsRecord):
        if self._fh is not None:
            self._csv.writerow([repr(x) if isinstance(x, float) else x for x in astuple(rec)])

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = types[k]
                vals[k] = v if t == "str" else (int(v) if t == "int" else float(v))
            out.append(MetricsRecord(**vals))
    return out


# -- retrieval -------------------------------------------------------------------

def _cosine_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.where(na > 0, a / np.where(na > 0, na, 1), 0)
    b = np.where(nb > 0, b / np.where(nb > 0, nb, 1), 0)
    return a @ b.T


def _strict_row_hits(sim):
    diag = np.diagonal(sim)
    others = sim.copy()
    np.fill_diagonal(others, -np.inf)
    return diag > others.max(axis=1)


def retrieval_r1(img_reps, txt_reps):
    """Fraction of rows whose match is the strict cosine maximum (ties fail)."""
    sim = _cosine_matrix(img_reps, txt_reps)
    return float(_strict_row_hits(sim).mean()), float(_strict_row_hits(sim.T).mean())


# -- topographic similarity ------------------------------------------------------

def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return float("nan")
    return float(rx @ ry) / denom


def topographic_similarity(meanings, reps) -> float:
    meanings = np.asarray(meanings)
    if len(meanings) < 3:
        raise ValueError("topographic similarity needs at least 3 items")
    iu = np.triu_indices(len(meanings), k=1)
    ham = (meanings[:, None, :] != meanings[None, :, :]).sum(-1)[iu]
    cos_d = 1.0 - _cosine_matrix(reps, reps)[iu]
    return spearman(ham, cos_d)


# -- Lipschitz bound ----------------------------------------------------------------

def lipschitz_upper_bound(agent: AgentParams, cb: Codebook | None, iters: int = 100, seed: int = 0) -> float:
    """Product of per-layer spectral norms, times that of the code matrix.

    ReLU is 1-Lipschitz and sparsemax is a projection, so the code matrix
    norm is the only factor the readout contributes.
    """
    bound = 1.0
    for layer in agent.layers:
        bound *= spectral_norm(layer.W, iters, seed)
    if cb is not None:
        bound *= spectral_norm(cb.codes, iters, seed)
    return bound


# -- evaluation during training ----------------------------------------------------

_EVAL_TAG = 104729


class Evaluator:
    def __init__(self, world: World, config):
        self.world = world
        self.config = config
        self.eval_batch = sample_batch(world, config.hyper.batch_size, [config.seed, _EVAL_TAG])
        self.meanings = all_meanings(world.spec)
        if len(self.meanings) > 512:
            keep = np.random.default_rng([config.seed, _EVAL_TAG, 1]).choice(len(self.meanings), 512, replace=False)
            self.meanings = self.meanings[np.sort(keep)]
        self.clean_images = render_images(world, self.meanings)

    def record(self, state, step, phase, lr, losses) -> MetricsRecord:
        use_cb = self.config.use_codebook
        cb = state.codebook if use_cb else None
        img, _ = encode_batch(state.vision, cb, self.eval_batch.image_patches, use_cb)
        txt, _ = encode_batch(state.language, cb, self.eval_batch.text_tokens, use_cb)
        r1_i2t, r1_t2i = retrieval_r1(img, txt)
        reps, w = encode_batch(state.vision, cb, self.clean_images, use_cb)
        topo = topographic_similarity(self.meanings, reps)
        active = 0 if w is None else int(np.sum(code_usage(w).frequency > 0))
        return MetricsRecord(
            step=step, generation=phase.generation, phase=phase.tag, lr=float(lr),
            loss_total=float(losses.total), loss_i2t=float(losses.i2t), loss_t2i=float(losses.t2i),
            loss_distill=float(losses.distill), r1_i2t=r1_i2t, r1_t2i=r1_t2i,
            lips_vision=lipschitz_upper_bound(state.vision, cb),
            lips_language=lipschitz_upper_bound(state.language, cb),
            topo_sim=float(topo), active_codes=active,
        )


# -- ease-of-learning probe -------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 500
    log_every: int = 50
    seed: int = 12345
    lr: float = 5e-4
    batch_size: int = 64
    tau: float = 0.07
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.98)


@dataclass
class ProbeResult:
    accuracy_curve: list = field(default_factory=list)
    probe_seed: int = 0
    source_generation: int = 0

    @property
    def final_r1(self):
        return self.accuracy_curve[-1][1]


def ease_of_learn_probe(vision: AgentParams, cb: Codebook | None, world: World, language_arch: AgentArch,
                        cfg: ProbeConfig = ProbeConfig(), source_generation: int = 0,
                        use_codebook: bool = True) -> ProbeResult:
    """Train a fresh language agent against a fixed vision agent and codebook.

    ``vision`` and ``cb`` are read but never written. r1 is the image-to-text
    in-batch accuracy on a fixed evaluation batch.
    """
    use_codebook = use_codebook and cb is not None
    student = init_agent(language_arch, cfg.seed)
    codes = ad.const(cb.codes) if use_codebook else None
    eval_batch = sample_batch(world, cfg.batch_size, [cfg.seed, _EVAL_TAG])
    eval_img, _ = encode_batch(vision, cb, eval_batch.image_patches, use_codebook)
    opt = {}
    curve = []

    def score(step):
        txt, _ = encode_batch(student, cb, eval_batch.text_tokens, use_codebook)
        curve.append((step, retrieval_r1(eval_img, txt)[0]))

    for step in range(cfg.steps):
        if step % cfg.log_every == 0:
            score(step)
        batch = sample_batch(world, cfg.batch_size, [cfg.seed, step])
        img, _ = encode_batch(vision, cb, batch.image_patches, use_codebook)

        def loss_fn(pv):
            txt, _ = encode_var(language_arch, pv, codes, batch.text_tokens, use_codebook)
            i2t, t2i = contrastive_terms(img, txt, cfg.tau)
            return ad.mul(ad.add(i2t, t2i), 0.5)

        params = student.named_parameters()
        _, grads = ad.compute_gradients(params, loss_fn, phase="Probe", step=step)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite probe gradient for {name}", phase="Probe", step=step)
            s = opt.get(name) or AdamWState.zeros_like(params[name])
            new_p, opt[name] = adamw_step(params[name], g, s, cfg.lr, cfg.betas, cfg.weight_decay)
            student.set_parameter(name, new_p)
    if not curve or curve[-1][0] != cfg.steps:
        score(cfg.steps)
    return ProbeResult(curve, cfg.seed, source_generation)
