"""Beam search under log p(s|I) - beta * log p(s), with a per-step beta schedule."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .nounphrase import validate_sentence

DEFAULT_BETA_CUTOFF = {"GOOD": 11, "TIP": 16}


class DecodingError(ValueError):
    pass


@dataclass
class DecodingConfig:
    beam_width: int = 10
    beta: float = 0.4
    beta_zero_after: int = None  # None -> 11 for GOOD, 16 for TIP
    max_length: int = 24
    filter_enabled: bool = True
    feedback_type: str = "GOOD"
    length_normalize: bool = False
    use_mmi: bool = True

    def __post_init__(self):
        if self.beta_zero_after is None:
            self.beta_zero_after = DEFAULT_BETA_CUTOFF.get(self.feedback_type, 11)
        if self.beam_width < 1:
            raise DecodingError("beam_width must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise DecodingError("beta must lie in [0, 1]")
        if self.beta_zero_after < 1:
            raise DecodingError("beta_zero_after must be >= 1")
        if self.max_length < 1:
            raise DecodingError("max_length must be >= 1")

    @property
    def effective_beta(self):
        return self.beta if self.use_mmi else 0.0


@dataclass
class Hypothesis:
    tokens: tuple
    logp_cond: float = 0.0
    logp_prior: float = 0.0
    score: float = 0.0
    finished: bool = False

    def rank_key(self, length_normalize=False):
        s = self.score
        if length_normalize and len(self.tokens) > 1:
            s = s / (len(self.tokens) - 1)
        return (-s, self.tokens)


def mmi_step_weight(t, config):
    """Weight on the language-model term when generating token ``t`` (1-based)."""
    if t < 1:
        raise DecodingError("steps are counted from 1")
    return config.effective_beta if t <= config.beta_zero_after else 0.0


def hypothesis_score(cond_steps, prior_steps, config):
    """Score of a token sequence from its per-step log-probabilities."""
    total = 0.0
    for t, (c, p) in enumerate(zip(cond_steps, prior_steps), 1):
        total += c - mmi_step_weight(t, config) * p
    return total


@dataclass
class BeamResult:
    hypotheses: list
    unfinished: bool = False


def beam_search(grid, captioner, lm, config, bos_id=0, eos_id=1, banned=(0, 2)):
    """Ranked finished hypotheses (at most ``beam_width``), best first.

    ``banned`` ids (begin and unknown by default) are never generated. When
    no hypothesis finishes within ``max_length`` the best live ones are
    returned and ``unfinished`` is set.
    """
    k = config.beam_width
    need_lm = config.effective_beta > 0.0
    if need_lm and lm is None:
        raise DecodingError("MMI decoding with beta > 0 needs a language model")
    if lm is not None and lm.vocab_size != captioner.vocab_size:
        raise DecodingError("captioner and language model vocabularies differ")
    V = captioner.vocab_size
    ban = np.zeros(V, dtype=bool)
    ban[list(banned)] = True

    with ad.no_grad():
        ctx, state = models.start(captioner, grid)
        lm_state = models.start(lm, batch=1)[1] if lm is not None else None

        live = [Hypothesis((bos_id,))]
        pool = []
        for t in range(1, config.max_length + 1):
            rows = len(live)
            prev = [h.tokens[-1] for h in live]
            step_ctx = models.select_rows(ctx, np.zeros(rows, dtype=np.int64)) if rows > 1 else ctx
            logp_c, state = models.step(captioner, step_ctx, state, prev)
            logp_c = logp_c.data
            if lm is not None:
                logp_p, lm_state = models.step(lm, None, lm_state, prev)
                logp_p = logp_p.data
            else:
                logp_p = np.zeros_like(logp_c)
            beta_t = mmi_step_weight(t, config)
            inc = logp_c - beta_t * logp_p if beta_t != 0.0 else logp_c
            scores = np.array([h.score for h in live])[:, None] + inc
            scores[:, ban] = -np.inf

            # live is kept in lexicographic token order, so a stable sort on
            # -score breaks ties by the candidate's full token sequence
            flat = scores.reshape(-1)
            n_keep = min(k - len(pool), int(np.isfinite(flat).sum()))
            order = np.argsort(-flat, kind="stable")[:n_keep]

            survivors = []
            for idx in order:
                r, w = divmod(int(idx), V)
                parent = live[r]
                hyp = Hypothesis(parent.tokens + (w,),
                                 parent.logp_cond + float(logp_c[r, w]),
                                 parent.logp_prior + float(logp_p[r, w]),
                                 float(flat[idx]),
                                 w == eos_id)
                if hyp.finished:
                    pool.append(hyp)
                else:
                    survivors.append((r, hyp))
            if len(pool) >= k or not survivors:
                live = [h for _, h in survivors]
                break
            survivors.sort(key=lambda rh: rh[1].tokens)
            keep = [r for r, _ in survivors]
            live = [h for _, h in survivors]
            state = models.select_rows(state, keep)
            if lm_state is not None:
                lm_state = models.select_rows(lm_state, keep)

    if pool:
        pool.sort(key=lambda h: h.rank_key(config.length_normalize))
        return BeamResult(pool[:k])
    live.sort(key=lambda h: h.rank_key(config.length_normalize))
    return BeamResult(live[:k], unfinished=True)


@dataclass
class DecodeResult:
    image_id: str
    tokens: list
    ids: tuple
    score: float
    logp_cond: float
    logp_prior: float
    beta: float
    beam_width: int
    filtered_count: int = 0
    filtered_fallback: bool = False
    unfinished: bool = False

    def record(self):
        return {
            "image_id": self.image_id,
            "sentence": " ".join(self.tokens),
            "score": self.score,
            "logp_cond": self.logp_cond,
            "logp_prior": self.logp_prior,
            "beta": self.beta,
            "beam_width": self.beam_width,
            "filtered_fallback": self.filtered_fallback,
        }


def decode_image(grid, captioner, lm, config, vocab, image_id=""):
    """Best beam hypothesis that passes the noun-phrase filter.

    Falls back to the overall best (flagged) when every candidate fails.
    """
    result = beam_search(grid, captioner, lm, config,
                         bos_id=vocab.bos_id, eos_id=vocab.eos_id,
                         banned=(vocab.bos_id, vocab.unk_id))
    chosen, filtered, fallback = result.hypotheses[0], 0, False
    if config.filter_enabled:
        chosen = None
        for h in result.hypotheses:
            verdict = validate_sentence(vocab.decode(h.tokens), config.feedback_type, vocab.pos)
            if verdict.valid:
                chosen = h
                break
            filtered += 1
        if chosen is None:
            chosen, fallback = result.hypotheses[0], True
    return DecodeResult(
        image_id=image_id,
        tokens=vocab.decode(chosen.tokens),
        ids=chosen.tokens,
        score=chosen.score,
        logp_cond=chosen.logp_cond,
        logp_prior=chosen.logp_prior,
        beta=config.effective_beta,
        beam_width=config.beam_width,
        filtered_count=filtered,
        filtered_fallback=fallback,
        unfinished=result.unfinished,
    )


def decode_corpus(examples, captioner, lm, config, vocab, threads=1):
    """Decode every example; output order follows ``examples``."""
    def one(ex):
        return decode_image(ex.grid, captioner, lm, config, vocab, image_id=ex.image_id)

    if threads <= 1:
        return [one(ex) for ex in examples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, examples))


def write_decoded(results, path):
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")


def read_decoded(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((str(rec["image_id"]), rec["sentence"].split(), rec))
            except (json.JSONDecodeError, KeyError, AttributeError) as exc:
                raise DecodingError(f"{path}:{lineno}: malformed decode record ({exc})") from None
    return out


def config_dict(config):
    return asdict(config)
