"""Finite-difference oracle shared by the gradient tests."""
import numpy as np


def central_differences(loss, params, h=1e-3, coords=None, rng=None):
    """Central differences of ``loss(params64) -> float`` evaluated in float64.

    ``coords`` limits the check to that many random coordinates per tensor.
    Returns ``{name: (flat indices, numeric derivatives)}``.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, arr in p64.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = np.sort(rng.choice(flat.size, coords, replace=False))
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss(p64)
            flat[i] = old - h
            down = loss(p64)
            flat[i] = old
            num[n] = (up - down) / (2 * h)
        out[name] = (idx, num)
    return out


def max_relative_error(analytic, numeric):
    """Worst per-tensor error ``max|a - n| / max|n|`` (infinity-norm relative error)."""
    worst = 0.0
    for name, (idx, num) in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        scale = max(np.max(np.abs(num)), np.max(np.abs(a)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num)) / scale))
    return worst


def simplex_projection_bruteforce(z):
    """Euclidean projection onto the simplex by enumerating every support set."""
    import itertools

    z = np.asarray(z, dtype=np.float64)
    best, best_d = None, np.inf
    for k in range(1, len(z) + 1):
        for S in itertools.combinations(range(len(z)), k):
            S = list(S)
            tau = (z[S].sum() - 1.0) / k
            p = np.zeros_like(z)
            p[S] = z[S] - tau
            if np.any(p[S] < 0):
                continue
            d = np.sum((p - z) ** 2)
            if d < best_d:
                best, best_d = p, d
    return best


def small_state(seed, *, C=6, D=4, hidden=(5,), A=2, V=3, P_extra=1, phase="Interact"):
    """A tiny random TrainState plus a batch, for gradient checks."""
    from iterlearn.agents import AgentArch, init_agent
    from iterlearn.codebook import init_codebook
    from iterlearn.training import Phase, TrainState
    from iterlearn.world import WorldSpec, make_world, sample_batch

    spec = WorldSpec(num_attributes=A, values_per_attribute=V, patch_dim=3, noise_sigma=0.3,
                     distractor_patches=P_extra, seed=seed)
    world = make_world(spec)
    state = TrainState(
        step=0, phase=Phase(phase, 1 if phase != "Warmup" else 0),
        vision=init_agent(AgentArch("vision", 3, D, hidden), seed),
        language=init_agent(AgentArch("language", 3, D, hidden, vocab_size=spec.vocab_size), seed + 1),
        codebook=init_codebook(C, D, seed + 2),
    )
    # nonzero biases keep the point generic: a dead relu layer with zero bias
    # yields an all-zero feature row, where l2 normalization is discontinuous
    rng = np.random.default_rng([seed, 99])
    for agent in (state.vision, state.language):
        for layer in agent.layers:
            layer.b = (0.3 * rng.standard_normal(layer.b.shape)).astype(np.float32)
    batch = sample_batch(world, min(5, spec.num_meanings), seed)
    return state, batch


def full_gradient_check(seed, *, frozen=False, distill=None, use_codebook=True, hard_negatives=False,
                        symmetric=True, h=1e-3):
    """Analytic encode->loss gradient against central differences with step ``h``.

    Returns ``(error, smooth)``. ``smooth`` is false when the loss is not
    smooth at scale ``h`` around this configuration (a relu, max-pool or
    sparsemax-support kink lies within reach), judged by comparing the
    differences at ``h`` and ``h/10`` -- independent of the analytic gradient.
    ``distill`` is None, "cosine" or "logit_kl".
    """
    from iterlearn import autodiff as ad
    from iterlearn.training import TrainHyper, batch_loss, teacher_representations
    from iterlearn.world import hard_negative_batch

    state, batch = small_state(seed, phase="Distill" if distill else "Interact")
    hyper = TrainHyper(tau=0.5, distill_mode=distill or "cosine", symmetric_loss=symmetric)
    if distill:
        state.teacher = state.language.copy()
        state.teacher.embeddings = state.teacher.embeddings + np.float32(0.3)
        state.teacher_role = "language" if seed % 2 == 0 else "vision"
        if state.teacher_role == "vision":
            from iterlearn.agents import init_agent
            state.teacher = init_agent(state.vision.arch, seed + 7)
    state.codebook.frozen = frozen
    neg = hard_negative_batch(batch.text_tokens, np.random.default_rng(seed), 3) if hard_negatives else None
    teacher = teacher_representations(state, batch, use_codebook)
    params = state.named_parameters()
    trainable = {k: v for k, v in params.items() if not (k == "codebook.codes" and (frozen or not use_codebook))}
    fixed = {k: ad.const(v) for k, v in params.items() if k not in trainable}

    def tape(leaves):
        return batch_loss({**fixed, **leaves}, state, batch, hyper, use_codebook=use_codebook,
                          neg_tokens=neg, teacher_reps=teacher)[0]

    _, analytic = ad.compute_gradients(trainable, tape)
    if frozen:
        assert "codebook.codes" not in analytic

    def numeric_loss(p64):
        return float(tape({k: ad.const(v) for k, v in p64.items()}).value)

    numeric = central_differences(numeric_loss, trainable, h=h)
    fine = central_differences(numeric_loss, trainable, h=h / 10)
    fine_as_analytic = {k: np.zeros(np.size(trainable[k])) for k in fine}
    for k, (idx, num) in fine.items():
        fine_as_analytic[k][idx] = num
    smooth = max_relative_error(fine_as_analytic, numeric) < 5e-4
    return max_relative_error(analytic, numeric), smooth
