"""Corpus metrics: BLEU-4, ROUGE-L, CIDEr-D, diversity, vocabulary usage."""

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _kernels
from .decoding import decode_corpus

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_N = 4

SWEEP_COLUMNS = ["beta", "beam", "bleu4", "rouge_l", "cider_d", "diversity",
                 "vocab_usage", "filtered_fallback_rate"]


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    bleu4: float
    rouge_l: float
    cider_d: float
    diversity: float
    vocab_usage: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(cands, refs):
    if not cands:
        raise MetricsError("empty candidate set")
    if len(cands) != len(refs):
        raise MetricsError(f"{len(cands)} candidates but {len(refs)} reference sets")
    for rs in refs:
        if not rs:
            raise MetricsError("every image needs at least one reference")


def bleu4(cands, refs):
    """Corpus BLEU-4: clipped n-gram precisions pooled over images, closest-length brevity."""
    _check(cands, refs)
    match = np.zeros(4)
    total = np.zeros(4)
    c_len = r_len = 0
    for cand, rs in zip(cands, refs):
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            ceiling = Counter()
            for r in rs:
                ceiling |= _ngrams(r, n)
            match[n - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    prec = np.where((match > 0) & (total > 0), match / np.maximum(total, 1), BLEU_EPSILON)
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(np.log(prec).mean()))


def _vocab_ids(cands, refs):
    table = {}
    def ids(seq):
        return [table.setdefault(t, len(table)) for t in seq]
    return [ids(c) for c in cands], [[ids(r) for r in rs] for rs in refs]


def rouge_l(cands, refs, beta=ROUGE_BETA):
    """Mean over images of the best LCS F-measure against any reference."""
    _check(cands, refs)
    cands_i, refs_i = _vocab_ids(cands, refs)
    scores = []
    for cand, rs in zip(cands_i, refs_i):
        best = 0.0
        for r in rs:
            lcs = _kernels.lcs_length(cand, r)
            if lcs == 0:
                continue
            p, rec = lcs / len(cand), lcs / len(r)
            best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
        scores.append(best)
    return float(np.mean(scores))


class _CiderVector:
    __slots__ = ("vec", "norm", "length")

    def __init__(self, tokens, df, log_n):
        self.vec = []
        self.norm = []
        for n in range(1, CIDER_N + 1):
            v = {g: c * (log_n - math.log(max(1.0, df.get(g, 0.0))))
                 for g, c in _ngrams(tokens, n).items()}
            self.vec.append(v)
            self.norm.append(math.sqrt(sum(x * x for x in v.values())))
        # matches the reference scorer, which counts bigrams as length
        self.length = max(len(tokens) - 1, 0)


def _cider_sim(h, r, sigma):
    delta = h.length - r.length
    penalty = math.exp(-(delta * delta) / (2 * sigma * sigma))
    total = 0.0
    for n in range(CIDER_N):
        vh, vr = h.vec[n], r.vec[n]
        val = sum(min(x, vr[g]) * vr[g] for g, x in vh.items() if g in vr)
        if h.norm[n] != 0 and r.norm[n] != 0:
            val /= h.norm[n] * r.norm[n]
        total += val * penalty
    return total / CIDER_N


def cider_d_per_image(cands, refs, sigma=CIDER_SIGMA):
    _check(cands, refs)
    if len(cands) < 2:
        raise MetricsError("CIDEr-D needs at least 2 images for document frequencies")
    df = defaultdict(float)
    for rs in refs:
        seen = set()
        for r in rs:
            for n in range(1, CIDER_N + 1):
                seen.update(_ngrams(r, n))
        for g in seen:
            df[g] += 1.0
    log_n = math.log(float(len(refs)))
    out = []
    for cand, rs in zip(cands, refs):
        h = _CiderVector(cand, df, log_n)
        s = sum(_cider_sim(h, _CiderVector(r, df, log_n), sigma) for r in rs)
        out.append(10.0 * s / len(rs))
    return out


def cider_d(cands, refs, sigma=CIDER_SIGMA):
    """CIDEr-D with document frequencies from the given reference sets."""
    return float(np.mean(cider_d_per_image(cands, refs, sigma)))


def diversity(generated):
    """Fraction of distinct sentences among the generated ones."""
    generated = list(generated)
    if not generated:
        raise MetricsError("empty generated corpus")
    return len({tuple(s) for s in generated}) / len(generated)


def vocab_usage(generated, vocab):
    """Fraction of (non-special) vocabulary words used at least once."""
    words = set(vocab.words)
    if not words:
        raise MetricsError("empty vocabulary")
    used = {t for s in generated for t in s if t in words}
    return len(used) / len(words)


def evaluate(cands, refs, vocab):
    return MetricsReport(
        bleu4=bleu4(cands, refs),
        rouge_l=rouge_l(cands, refs),
        cider_d=cider_d(cands, refs),
        diversity=diversity(cands),
        vocab_usage=vocab_usage(cands, vocab),
    )


def fs_baseline(eval_set, vocab, seed=0):
    """Score one randomly held-out reference per image against the others."""
    rng = np.random.default_rng(seed)
    cands, refs = [], []
    for ex in eval_set:
        if len(ex.sentences) < 2:
            raise MetricsError(f"image {ex.image_id} has fewer than 2 references")
        pick = int(rng.integers(len(ex.sentences)))
        cands.append(list(ex.sentences[pick]))
        refs.append([s for i, s in enumerate(ex.sentences) if i != pick])
    return evaluate(cands, refs, vocab)


def evaluate_decoded(results, eval_set, vocab):
    by_id = {r.image_id: r.tokens for r in results}
    missing = [ex.image_id for ex in eval_set if ex.image_id not in by_id]
    if missing:
        raise MetricsError(f"no generated sentence for {len(missing)} images, e.g. {missing[0]}")
    cands = [by_id[ex.image_id] for ex in eval_set]
    refs = [ex.sentences for ex in eval_set]
    return evaluate(cands, refs, vocab)


def sweep(captioner, lm, eval_set, vocab, beta_grid, beam_grid, base_config,
          filter_enabled=None, threads=1):
    """Decode and score the eval set for every (beta, beam) cell; rows in grid order."""
    beta_grid, beam_grid = list(beta_grid), list(beam_grid)
    if not beta_grid or not beam_grid:
        raise MetricsError("sweep grids must be non-empty")
    rows = []
    for beta in beta_grid:
        for beam in beam_grid:
            cfg = replace(base_config, beta=float(beta), beam_width=int(beam))
            if filter_enabled is not None:
                cfg.filter_enabled = filter_enabled
            results = decode_corpus(eval_set, captioner, lm, cfg, vocab, threads=threads)
            rep = evaluate_decoded(results, eval_set, vocab)
            row = {"beta": float(beta), "beam": int(beam), **asdict(rep)}
            row["filtered_fallback_rate"] = float(np.mean([r.filtered_fallback for r in results]))
            rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
