"""Teacher-forcing training with Adam, encoder freezing, and checkpoint selection."""

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .decoding import DecodingConfig, decode_corpus
from .metrics import cider_d

CKPT_MAGIC = b"MMIC"
CKPT_VERSION = 1


class TrainingError(Exception):
    pass


class CheckpointError(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    images_per_batch: int = 32
    sentences_per_image: int = 3
    dropout: float = 0.5
    freeze_encoder_epochs: int = 10
    eval_every: int = 1
    eval_beam: int = 10
    clip_norm: float = 5.0
    target_loss: float = 0.0  # stop once an epoch's mean training loss falls below this
    hidden: int = 64
    embed: int = 64
    feat: int = 64
    att: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError("dropout must lie in [0, 1)")
        if self.images_per_batch < 1 or self.sentences_per_image < 1:
            raise TrainingError("batch composition must be positive")

    @property
    def effective_batch(self):
        return self.images_per_batch * self.sentences_per_image


@dataclass
class Checkpoint:
    model: models.Model
    vocab_hash: str
    config: dict = field(default_factory=dict)
    epoch: int = 0
    metric_name: str = "cider_d"
    metric: float = float("nan")

    @property
    def best_cider_d(self):
        return self.metric if self.metric_name == "cider_d" else float("nan")


# ---------------------------------------------------------------------------
# batches and loss
# ---------------------------------------------------------------------------

def pad_batch(sequences, pad_id):
    """Stack framed id sequences into (B, L) with ``pad_id`` filling."""
    L = max(len(s) for s in sequences)
    out = np.full((len(sequences), L), pad_id, dtype=np.int64)
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out, lengths


def _dropout_masks(model, batch, rate, rng):
    if rng is None or rate == 0.0:
        return None
    return {
        "embed": (rng.random((batch, model.dims["embed"])) >= rate).astype(np.float64),
        "out": (rng.random((batch, model.dims["hidden"])) >= rate).astype(np.float64),
    }


def teacher_forcing_loss(model, ids, lengths, grids=None, rate=0.0, rng=None):
    """Mean negative log-likelihood per predicted token.

    ``ids`` is (B, L) of framed sentences, ``lengths`` their true lengths.
    Dropout masks on embeddings and the output layer are drawn from ``rng``
    once per step when ``rate`` > 0.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise TrainingError("empty batch")
    B, L = ids.shape
    n_tokens = int(np.sum(lengths - 1))
    if n_tokens <= 0:
        raise TrainingError("batch has no tokens to predict")
    ctx, state = models.start(model, grids, batch=B)
    total = None
    for t in range(1, L):
        valid = (lengths > t).astype(np.float64)
        if not valid.any():
            break
        masks = _dropout_masks(model, B, rate, rng)
        logp, state = models.step(model, ctx, state, ids[:, t - 1], masks, rate)
        term = ad.sum_all(ad.mul(ad.pick(logp, ids[:, t]), valid))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0 / n_tokens)


class Adam:
    """Adam with bias correction over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, grads, skip=()):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        for name, g in grads.items():
            if name in skip:
                continue
            p = self.params[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, optimizer):
    """Apply one Adam update in place; ``grads`` maps names to arrays."""
    optimizer.step(grads)
    return params


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def _train_step(model, opt, ids, lengths, grids, config, rng, frozen=()):
    trainable = {k: p for k, p in model.params.items() if k not in frozen}
    for k, p in model.params.items():
        p.requires_grad = k not in frozen
    try:
        with ad.Tape() as tape:
            loss = teacher_forcing_loss(model, ids, lengths, grids, config.dropout, rng)
        g = ad.backward(tape, loss, list(trainable.values()))
    finally:
        for p in model.params.values():
            p.requires_grad = True
    grads = {k: g[p] for k, p in trainable.items()}
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    opt.step(grads)
    return float(loss.data)


# ---------------------------------------------------------------------------
# captioner
# ---------------------------------------------------------------------------

def _image_batches(n_images, config, rng):
    order = rng.permutation(n_images)
    for i in range(0, n_images, config.images_per_batch):
        yield order[i:i + config.images_per_batch]


def _sample_sentences(encoded, count, rng):
    if len(encoded) >= count:
        pick = rng.choice(len(encoded), size=count, replace=False)
    else:
        pick = rng.choice(len(encoded), size=count, replace=True)
    return [encoded[j] for j in sorted(pick)]


def evaluate_cider(model, eval_set, vocab, beam=10, threads=1, feedback_type="GOOD"):
    cfg = DecodingConfig(beam_width=beam, beta=0.0, use_mmi=False, filter_enabled=False,
                         feedback_type=feedback_type)
    results = decode_corpus(eval_set, model, None, cfg, vocab, threads=threads)
    return cider_d([r.tokens for r in results], [ex.sentences for ex in eval_set])


def transfer_encoder_weights(source, target):
    """Copy the encoder projection of ``source`` into ``target`` (in place)."""
    src = source.model if isinstance(source, Checkpoint) else source
    for name in models.encoder_param_names(target):
        if name not in src.params:
            raise TrainingError(f"source model has no {name!r}")
        if src.params[name].shape != target.params[name].shape:
            raise TrainingError(
                f"shape mismatch for {name!r}: {src.params[name].shape} vs {target.params[name].shape}")
        target.params[name].data[...] = src.params[name].data
    return target


def train_captioner(train_set, eval_set, vocab, config=None, kind="topdown", init=None,
                    threads=1, log=None, allow_vocab_mismatch=False):
    """Train a captioner; return (best checkpoint by eval CIDEr-D, epoch log rows).

    ``init`` may be a Checkpoint whose encoder projection seeds the new model
    (GOOD -> TIP transfer). Its vocabulary must match unless
    ``allow_vocab_mismatch`` is set; only encoder weights move, so a transfer
    between feedback types with separate vocabularies is legitimate.
    ``log`` is an optional callable receiving each row.
    """
    config = config or TrainConfig()
    if not train_set:
        raise TrainingError("empty training set")
    feat_in = train_set[0].grid.shape[-1]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    model = models.init_model(kind, len(vocab), feat_in=feat_in, hidden=config.hidden,
                              embed=config.embed, feat=config.feat, att=config.att,
                              seed=config.seed)
    if init is not None:
        if init.vocab_hash != vocab.hash() and not allow_vocab_mismatch:
            raise CheckpointError("transfer checkpoint vocabulary does not match")
        transfer_encoder_weights(init, model)
    feedback_type = train_set[0].feedback_type
    opt = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    encoded = [[vocab.encode(s) for s in ex.sentences] for ex in train_set]
    grids = np.stack([ex.grid for ex in train_set])
    frozen_names = set(models.encoder_param_names(model))

    rows = []
    best = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        frozen = frozen_names if epoch <= config.freeze_encoder_epochs else set()
        losses, weights = [], []
        for img_idx in _image_batches(len(train_set), config, rng):
            seqs, rows_idx = [], []
            for i in img_idx:
                for s in _sample_sentences(encoded[i], config.sentences_per_image, rng):
                    seqs.append(s)
                    rows_idx.append(i)
            ids, lengths = pad_batch(seqs, vocab.eos_id)
            loss = _train_step(model, opt, ids, lengths, grids[rows_idx], config, rng, frozen)
            losses.append(loss)
            weights.append(int(np.sum(lengths - 1)))
        train_loss = float(np.average(losses, weights=weights))
        score = float("nan")
        if eval_set and config.eval_every and epoch % config.eval_every == 0:
            score = evaluate_cider(model, eval_set, vocab, config.eval_beam, threads, feedback_type)
            if best is None or score > best.metric:
                best = Checkpoint(model.copy(), vocab.hash(), asdict(config), epoch, "cider_d", score)
        row = {"epoch": epoch, "train_loss": train_loss, "eval_cider_d": score,
               "wall_seconds": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(row)
        if train_loss < config.target_loss:
            break
    if best is None:
        best = Checkpoint(model.copy(), vocab.hash(), asdict(config), rows[-1]["epoch"],
                          "cider_d", float("nan"))
    return best, rows


def write_epoch_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "eval_cider_d", "wall_seconds"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# language model
# ---------------------------------------------------------------------------

def perplexity(model, sequences, batch_size=256):
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(sequences), batch_size):
            ids, lengths = pad_batch(sequences[i:i + batch_size], 1)
            n = int(np.sum(lengths - 1))
            loss = teacher_forcing_loss(model, ids, lengths)
            total += float(loss.data) * n
            count += n
    return math.exp(total / count)


def split_heldout(sequences, fraction, rng):
    idx = rng.permutation(len(sequences))
    n_hold = max(1, int(round(fraction * len(sequences)))) if len(sequences) > 1 else 0
    hold = sorted(idx[:n_hold])
    train = sorted(idx[n_hold:])
    return [sequences[i] for i in train], [sequences[i] for i in hold]


def train_lm(sentences, vocab, config=None, heldout=None, heldout_fraction=0.1, log=None):
    """Train the auxiliary LM on token lists; keep the lowest held-out perplexity.

    With a single training sentence and no explicit ``heldout`` the training
    set itself is used for selection.
    """
    config = config or TrainConfig()
    seqs = [vocab.encode(s) for s in sentences]
    if not seqs:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    if heldout is None:
        seqs, held = split_heldout(seqs, heldout_fraction, rng) if len(seqs) > 1 else (seqs, [])
    else:
        held = [vocab.encode(s) for s in heldout]
    if not held:
        held = seqs
    model = models.init_model("lm", len(vocab), hidden=config.hidden, embed=config.embed,
                              seed=config.seed)
    opt = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    bs = config.effective_batch
    best, rows = None, []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(seqs))
        losses, weights = [], []
        for i in range(0, len(order), bs):
            ids, lengths = pad_batch([seqs[j] for j in order[i:i + bs]], vocab.eos_id)
            losses.append(_train_step(model, opt, ids, lengths, None, config, rng))
            weights.append(int(np.sum(lengths - 1)))
        ppl = perplexity(model, held)
        if best is None or ppl < best.metric:
            best = Checkpoint(model.copy(), vocab.hash(), asdict(config), epoch, "perplexity", ppl)
        row = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)),
               "heldout_perplexity": ppl, "wall_seconds": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(row)
    return best, rows


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt, path):
    names = list(ckpt.model.params)
    header = {
        "kind": ckpt.model.kind,
        "dims": ckpt.model.dims,
        "tensors": [{"name": n, "shape": list(ckpt.model.params[n].shape)} for n in names],
        "config": ckpt.config,
        "vocab_hash": ckpt.vocab_hash,
        "epoch": ckpt.epoch,
        "metric_name": ckpt.metric_name,
        "metric": None if math.isnan(ckpt.metric) else ckpt.metric,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path, vocab_hash=None):
    """Read a checkpoint; raise if ``vocab_hash`` is given and differs."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    offset = 12 + hlen
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated tensor data for {spec['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        params[spec["name"]] = Tensor(arr.copy(), requires_grad=True, name=spec["name"])
        offset += n
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    metric = header.get("metric")
    model = models.Model(header["kind"], header["dims"], params)
    return Checkpoint(model, header["vocab_hash"], header["config"], header["epoch"],
                      header.get("metric_name", "cider_d"),
                      float("nan") if metric is None else float(metric))
