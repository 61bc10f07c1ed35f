"""Shared test fixtures that are plain functions (importable from several test files)."""

import numpy as np

from mmicap import autodiff as ad
from mmicap import models


def small_model(kind, vocab=7, width=8, feat_in=5, seed=0, scale=0.5):
    """A width-8 model with parameters large enough to give non-trivial gradients."""
    m = models.init_model(kind, vocab, feat_in=feat_in, hidden=width, embed=width,
                          feat=width, att=width, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.params.values():
        p.data[...] = rng.uniform(-scale, scale, p.shape)
    return m


def _rand_state(cls, rng, batch, width):
    return cls(*(ad.Tensor(rng.uniform(-1, 1, (batch, width))) for _ in cls._fields))


def step_gradcheck(kind, seed=0, batch=2, width=8):
    """Max relative gradient error of one step of ``kind`` under a dense random loss.

    ``kind`` is one of decoder, fc, lm, attention. States are random and
    non-zero so every parameter receives a well-scaled gradient.
    """
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((batch, 2, 3, 5))
    prev = rng.integers(0, 7, batch)
    if kind == "decoder":
        m = small_model("topdown", width=width, seed=seed)
        state = _rand_state(models.DecoderState, rng, batch, width)
        w = ad.Tensor(rng.uniform(-1, 1, (batch, 7)))

        def f():
            v, v_bar = models.encode_features(m, grid)
            enc = models.Encoded(v, v_bar, ad.matmul(v, m.params["att.Wv"]))
            logp, _, _ = models.decoder_step(m, state, enc, prev)
            return ad.sum_all(ad.mul(logp, w))
    elif kind == "fc":
        m = small_model("fc", width=width, seed=seed)
        state = _rand_state(models.LSTMState, rng, batch, width)
        w = ad.Tensor(rng.uniform(-1, 1, (batch, 7)))

        def f():
            _, v_bar = models.encode_features(m, grid)
            logp, st = models.fc_baseline_step(m, state,
                                               image_embedding=models.image_embedding(m, v_bar))
            logp2, _ = models.fc_baseline_step(m, st, prev_ids=prev)
            return ad.add(ad.sum_all(ad.mul(logp, w)), ad.sum_all(ad.mul(logp2, w)))
    elif kind == "lm":
        m = small_model("lm", width=width, seed=seed)
        state = _rand_state(models.LSTMState, rng, batch, width)
        w = ad.Tensor(rng.uniform(-1, 1, (batch, 7)))

        def f():
            logp, _ = models.lm_step(m, state, prev)
            return ad.sum_all(ad.mul(logp, w))
    elif kind == "attention":
        m = small_model("topdown", width=width, seed=seed)
        v = ad.Tensor(rng.uniform(-1, 1, (batch, 6, width)), requires_grad=True)
        h1 = ad.Tensor(rng.uniform(-1, 1, (batch, width)), requires_grad=True)
        wv = ad.Tensor(rng.uniform(-1, 1, (batch, width)))
        wa = ad.Tensor(rng.uniform(-1, 1, (batch, 6)))
        params = [v, h1, m.params["att.Wv"], m.params["att.Wh"], m.params["att.u"]]

        def f():
            v_hat, alpha = models.attention_step(v, h1, m.params)
            return ad.add(ad.sum_all(ad.mul(v_hat, wv)), ad.sum_all(ad.mul(alpha, wa)))

        return ad.grad_check(f, params, epsilon=1e-5)
    else:
        raise ValueError(kind)
    return ad.grad_check(f, m.param_list(), epsilon=1e-5)


def hand_set(model, scale=1.5):
    """Deterministic, structured parameters (no RNG) for small oracle tests."""
    for k, (name, p) in enumerate(sorted(model.params.items())):
        idx = np.arange(p.data.size, dtype=float)
        p.data[...] = (scale * np.sin(1.7 * idx + 0.9 * k + 0.3)).reshape(p.shape)
    return model


def enumerate_best(grid, captioner, lm, config, tokens=(1, 2, 3), eos=1):
    """Score every finished sequence up to ``config.max_length`` by teacher forcing.

    Returns (best_tokens, best_score, all_scores) with ties broken by token order.
    """
    import itertools

    from mmicap import decoding

    scored = []
    for n in range(config.max_length):
        for body in itertools.product([t for t in tokens if t != eos], repeat=n):
            ids = (0, *body, eos)
            cond = models.step_log_probs(captioner, ids, grid)
            prior = models.step_log_probs(lm, ids) if lm is not None else [0.0] * len(cond)
            scored.append((decoding.hypothesis_score(cond, prior, config), ids))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored[0][1], scored[0][0], scored
