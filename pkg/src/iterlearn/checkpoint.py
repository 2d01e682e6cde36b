"""JSON checkpoints: version, config hash and named tensors as shape + flat data."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from .agents import AgentParams, init_agent
from .errors import CheckpointError
from .nn import AdamWState
from .training import Phase, TrainState

log = logging.getLogger(__name__)

VERSION = 1


def _tensor(a) -> dict:
    a = np.asarray(a)
    # float(np.float32) is exact in a double and repr round-trips doubles
    return {"shape": list(a.shape), "dtype": str(a.dtype), "data": [float(x) for x in a.ravel()]}


def _array(d) -> np.ndarray:
    try:
        return np.asarray(d["data"], dtype=d.get("dtype", "float32")).reshape(d["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"malformed tensor entry: {e}") from e


def _arch_dict(arch):
    return {"kind": arch.kind, "input_dim": arch.input_dim, "output_dim": arch.output_dim,
            "hidden_dims": list(arch.hidden_dims), "vocab_size": arch.vocab_size}


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = dict(state.named_parameters())
    for name, s in state.opt.items():
        out[f"opt.m.{name}"] = s.m
        out[f"opt.v.{name}"] = s.v
    for name, v in state.spectral_vectors.items():
        out[f"spectral.{name}"] = v
    if state.teacher is not None:
        for k, v in state.teacher.named_parameters().items():
            out[f"teacher.{k}"] = v
    return out


def save_checkpoint(state: TrainState, path, config=None) -> Path:
    from .config import config_hash, to_dict

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": VERSION,
        "config_hash": config_hash(config) if config is not None else None,
        "config": to_dict(config) if config is not None else None,
        "step": state.step,
        "phase": {"tag": state.phase.tag, "generation": state.phase.generation},
        "frozen": state.codebook.frozen,
        "teacher_role": state.teacher_role,
        "spawn_history": state.spawn_history,
        "arch": {"vision": _arch_dict(state.vision.arch), "language": _arch_dict(state.language.arch)},
        "opt_t": {name: s.t for name, s in state.opt.items()},
        "tensors": {k: _tensor(v) for k, v in state_tensors(state).items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint: {e}") from e
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError(f"{path}: not a checkpoint document")
    if doc["version"] != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc['version']} != supported {VERSION}")
    return doc


def load_checkpoint(path, config=None) -> TrainState:
    from .agents import AgentArch
    from .codebook import Codebook
    from .config import config_hash

    doc = read_checkpoint(path)
    if config is not None and doc.get("config_hash") not in (None, config_hash(config)):
        log.warning("checkpoint %s was written under a different config (hash %s != %s)",
                    path, doc.get("config_hash"), config_hash(config))
    try:
        tensors = {k: _array(v) for k, v in doc["tensors"].items()}

        def agent(prefix, arch):
            p = init_agent(arch, 0)
            for name in p.named_parameters():
                p.set_parameter(name, tensors[f"{prefix}.{name}"])
            return p

        archs = {k: AgentArch(**v) for k, v in doc["arch"].items()}
        state = TrainState(
            step=int(doc["step"]),
            phase=Phase(doc["phase"]["tag"], int(doc["phase"]["generation"])),
            vision=agent("vision", archs["vision"]),
            language=agent("language", archs["language"]),
            codebook=Codebook(tensors["codebook.codes"], bool(doc["frozen"])),
            spawn_history=list(doc.get("spawn_history", [])),
        )
        for name, t in doc["opt_t"].items():
            state.opt[name] = AdamWState(tensors[f"opt.m.{name}"], tensors[f"opt.v.{name}"], int(t))
        for k, v in tensors.items():
            if k.startswith("spectral."):
                state.spectral_vectors[k[len("spectral."):]] = v
        role = doc.get("teacher_role")
        if role is not None:
            state.teacher = agent("teacher", archs[role])
            state.teacher_role = role
    except KeyError as e:
        raise CheckpointError(f"{path}: missing entry {e}") from e
    return state


def load_agents(path) -> tuple[AgentParams, AgentParams, object, dict]:
    """``(vision, language, codebook, document)`` from a checkpoint."""
    state = load_checkpoint(path)
    return state.vision, state.language, state.codebook, read_checkpoint(path)
