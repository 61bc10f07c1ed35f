"""Top-down attention captioner, no-attention FC baseline, and LSTM language model.

All three expose the same stepping protocol so training and beam search can
treat them alike::

    ctx, state = start(model, grids)          # grids: (B, H, W, D_in) or None
    logp, state = step(model, ctx, state, prev_ids)

``logp`` is a (B, V) tensor of next-word log-probabilities.
"""

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("topdown", "fc", "lm")

INIT_SCALE = 0.08

DecoderState = namedtuple("DecoderState", "h1 c1 h2 c2")
LSTMState = namedtuple("LSTMState", "h c")
Encoded = namedtuple("Encoded", "v v_bar vp")


class ModelError(ValueError):
    pass


@dataclass
class Model:
    kind: str
    dims: dict
    params: dict = field(default_factory=dict)

    @property
    def vocab_size(self):
        return self.dims["vocab_size"]

    def param_list(self):
        return list(self.params.values())

    def copy(self):
        return Model(self.kind, dict(self.dims),
                     {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                      for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _uniform(rng, shape):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def _lstm_params(rng, prefix, n_in, hidden):
    W = _uniform(rng, (n_in + hidden, 4 * hidden))
    b = _uniform(rng, (4 * hidden,))
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {f"{prefix}.W": W, f"{prefix}.b": b}


def _wrap(arrays):
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def init_model(kind, vocab_size, feat_in=32, hidden=64, embed=64, feat=64, att=64, seed=0):
    """Fresh parameters for one of ``topdown``, ``fc`` or ``lm``.

    ``feat_in`` is the depth of the input feature grid, ``feat`` the width of
    the projected features, ``att`` the attention hidden width.
    """
    if kind not in KINDS:
        raise ModelError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    dims = {"vocab_size": int(vocab_size), "hidden": hidden, "embed": embed}
    p = {"embed": _uniform(rng, (vocab_size, embed))}
    if kind in ("topdown", "fc"):
        dims.update(feat_in=feat_in, feat=feat)
        # He-uniform so the ReLU features start at unit scale, like pretrained CNN outputs
        bound = np.sqrt(6.0 / feat_in)
        p["proj.W"] = rng.uniform(-bound, bound, size=(feat_in, feat))
        p["proj.b"] = np.zeros(feat)
    if kind == "topdown":
        dims["att"] = att
        p.update(_lstm_params(rng, "lstm1", hidden + feat + embed, hidden))
        p["att.Wv"] = _uniform(rng, (feat, att))
        p["att.Wh"] = _uniform(rng, (hidden, att))
        p["att.u"] = _uniform(rng, (att,))
        p.update(_lstm_params(rng, "lstm2", feat + hidden, hidden))
    else:
        if kind == "fc":
            p["img.W"] = _uniform(rng, (feat, embed))
            p["img.b"] = _uniform(rng, (embed,))
        p.update(_lstm_params(rng, "lstm", embed, hidden))
    p["out.W"] = _uniform(rng, (hidden, vocab_size))
    p["out.b"] = np.zeros(vocab_size)
    return Model(kind, dims, _wrap(p))


def encoder_param_names(model):
    return [k for k in model.params if k.startswith("proj.")]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def lstm_cell(x, h, c, W, b):
    """One LSTM step; gate order input, forget, output, candidate."""
    n = h.shape[-1]
    z = ad.add(ad.matmul(ad.concat([x, h]), W), b)
    i = ad.sigmoid(ad.slice_last(z, 0, n))
    f = ad.sigmoid(ad.slice_last(z, n, 2 * n))
    o = ad.sigmoid(ad.slice_last(z, 2 * n, 3 * n))
    g = ad.tanh(ad.slice_last(z, 3 * n, 4 * n))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _as_batch(grids):
    g = grids.data if isinstance(grids, Tensor) else np.asarray(grids, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    if g.ndim != 4:
        raise ModelError(f"expected (B, H, W, D) grids, got shape {g.shape}")
    return g


def encode_features(model, grids):
    """Project every grid cell through ReLU(x W + b); return (v, v_bar).

    ``v`` is (B, H*W, feat) and ``v_bar`` its mean over the cells.
    """
    g = _as_batch(grids)
    B, H, W, D = g.shape
    if D != model.dims["feat_in"]:
        raise ModelError(f"grid depth {D} != projection input width {model.dims['feat_in']}")
    cells = g.reshape(B, H * W, D)
    v = ad.relu(ad.add(ad.matmul(cells, model.params["proj.W"]), model.params["proj.b"]))
    return v, ad.mean(v, axis=1)


def attention_step(v, h1, params, vp=None):
    """Attention weights over cells and the attended feature.

    ``vp`` is ``v @ att.Wv`` and may be passed in precomputed since it does
    not depend on the step.
    """
    if vp is None:
        vp = ad.matmul(v, params["att.Wv"])
    hp = ad.matmul(h1, params["att.Wh"])
    scores = ad.additive_attention(vp, hp, params["att.u"])
    alpha = ad.softmax(scores)
    B, N = alpha.shape
    v_hat = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, N)), v), (B, v.shape[-1]))
    return v_hat, alpha


def _zeros(batch, width):
    return Tensor(np.zeros((batch, width)))


def _embed(model, ids, masks, rate):
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise ModelError(f"word id out of range for vocabulary of {model.vocab_size}")
    e = ad.embedding(model.params["embed"], ids)
    if masks is not None and "embed" in masks:
        e = ad.dropout(e, masks["embed"], rate)
    return e


def _output(model, h, masks, rate):
    if masks is not None and "out" in masks:
        h = ad.dropout(h, masks["out"], rate)
    return ad.log_softmax(ad.add(ad.matmul(h, model.params["out.W"]), model.params["out.b"]))


# ---------------------------------------------------------------------------
# per-model steps
# ---------------------------------------------------------------------------

def decoder_step(model, state, enc, prev_ids, masks=None, rate=0.0):
    """One step of the two-layer top-down decoder.

    Returns (log-probabilities (B, V), new DecoderState, attention (B, N)).
    """
    p = model.params
    e = _embed(model, prev_ids, masks, rate)
    x1 = ad.concat([state.h2, enc.v_bar, e])
    h1, c1 = lstm_cell(x1, state.h1, state.c1, p["lstm1.W"], p["lstm1.b"])
    v_hat, alpha = attention_step(enc.v, h1, p, vp=enc.vp)
    h2, c2 = lstm_cell(ad.concat([v_hat, h1]), state.h2, state.c2, p["lstm2.W"], p["lstm2.b"])
    return _output(model, h2, masks, rate), DecoderState(h1, c1, h2, c2), alpha


def fc_baseline_step(model, state, prev_ids=None, image_embedding=None, masks=None, rate=0.0):
    """One step of the single-LSTM baseline.

    Pass ``image_embedding`` (B, embed) on the first step and word ids after.
    """
    if (prev_ids is None) == (image_embedding is None):
        raise ModelError("give exactly one of prev_ids or image_embedding")
    x = image_embedding if prev_ids is None else _embed(model, prev_ids, masks, rate)
    h, c = lstm_cell(x, state.h, state.c, model.params["lstm.W"], model.params["lstm.b"])
    return _output(model, h, masks, rate), LSTMState(h, c)


def lm_step(model, state, prev_ids, masks=None, rate=0.0):
    e = _embed(model, prev_ids, masks, rate)
    h, c = lstm_cell(e, state.h, state.c, model.params["lstm.W"], model.params["lstm.b"])
    return _output(model, h, masks, rate), LSTMState(h, c)


def image_embedding(model, v_bar):
    return ad.add(ad.matmul(v_bar, model.params["img.W"]), model.params["img.b"])


# ---------------------------------------------------------------------------
# uniform stepping protocol
# ---------------------------------------------------------------------------

def start(model, grids=None, batch=None):
    """Encode images (if any) and return ``(ctx, initial_state)``."""
    hid = model.dims["hidden"]
    if model.kind == "lm":
        if batch is None:
            batch = 1 if grids is None else _as_batch(grids).shape[0]
        return None, LSTMState(_zeros(batch, hid), _zeros(batch, hid))
    if grids is None:
        raise ModelError(f"{model.kind} model needs image grids")
    v, v_bar = encode_features(model, grids)
    B = v.shape[0]
    if model.kind == "topdown":
        vp = ad.matmul(v, model.params["att.Wv"])
        z = [_zeros(B, hid) for _ in range(4)]
        return Encoded(v, v_bar, vp), DecoderState(*z)
    state = LSTMState(_zeros(B, hid), _zeros(B, hid))
    _, state = fc_baseline_step(model, state, image_embedding=image_embedding(model, v_bar))
    return None, state


def step(model, ctx, state, prev_ids, masks=None, rate=0.0):
    if model.kind == "topdown":
        logp, state, _ = decoder_step(model, state, ctx, prev_ids, masks, rate)
        return logp, state
    if model.kind == "fc":
        return fc_baseline_step(model, state, prev_ids=prev_ids, masks=masks, rate=rate)
    return lm_step(model, state, prev_ids, masks, rate)


def select_rows(obj, rows):
    """Reindex the batch axis of a state or context (no gradient)."""
    if obj is None:
        return None
    rows = np.asarray(rows, dtype=np.int64)
    return type(obj)(*(Tensor(t.data[rows]) for t in obj))


# ---------------------------------------------------------------------------
# sequence scoring
# ---------------------------------------------------------------------------

def step_log_probs(model, ids, grid=None):
    """Per-step log p(w_t | w_<t [, I]) for t = 1..T of one framed sentence."""
    ids = [int(i) for i in ids]
    if len(ids) < 2:
        raise ModelError("a framed sentence has at least begin and end tokens")
    out = []
    with ad.no_grad():
        ctx, state = start(model, grid, batch=1)
        for t in range(1, len(ids)):
            logp, state = step(model, ctx, state, [ids[t - 1]])
            out.append(float(logp.data[0, ids[t]]))
    return out


def sentence_log_prob_given_image(model, ids, grid):
    """log p(s | I): sum of teacher-forced step log-probabilities."""
    if model.kind == "lm":
        raise ModelError("use lm_sentence_log_prob for a language model")
    return float(np.sum(step_log_probs(model, ids, grid)))


def lm_sentence_log_prob(model, ids):
    """log p(s) under the language model."""
    if model.kind != "lm":
        raise ModelError("expected a language model")
    return float(np.sum(step_log_probs(model, ids)))
