"""Synthetic outfit corpus: planted feature grids plus templated feedback.

Each image gets one value per attribute slot (garment kind, colors, pattern,
shoes). Every slot owns a disjoint rectangle of the feature grid, and the
chosen value is written there as a fixed prototype vector, scaled by a
per-image clarity, plus noise. A sentence is either a specific template that names some of those values, or a
generic template that fits any image.
"""

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Example, FEEDBACK_TYPES

COLORS = ["black", "white", "red", "blue", "green", "pink", "gray", "navy"]

DEFAULT_INVENTORY = {
    "top": ["jacket", "shirt", "sweater", "blouse", "coat", "cardigan", "hoodie", "vest"],
    "top_color": COLORS,
    "pattern": ["striped", "floral", "plaid", "dotted", "checkered"],
    "bottom": ["jeans", "skirt", "leggings", "pants", "shorts", "trousers"],
    "bottom_color": COLORS,
    "shoes": ["sneakers", "boots", "heels", "sandals", "loafers"],
}

# slot -> (row band, column band) on a 2x3 layout; the last grid row stays background
SLOT_LAYOUT = {
    "top": (0, 0), "top_color": (0, 1), "pattern": (0, 2),
    "bottom": (1, 0), "bottom_color": (1, 1), "shoes": (1, 2),
}

# (template, weight). {slot} names the image's value; {alt_slot} a different value.
# Specific sentences open with one of three common words; generic ones open
# with words of their own, so a narrow beam can prune them at the first step.
SPECIFIC_TEMPLATES = {
    "GOOD": [
        ("the {top_color} {top} looks great on you", 3.0),
        ("the {top_color} {top} goes well with your {bottom}", 1.0),
        ("the {pattern} {top} and {bottom_color} {bottom} look great together", 1.0),
        ("the {top_color} and {bottom_color} combination works well", 1.0),
        ("your {bottom_color} {bottom} fit you well", 1.0),
        ("your {pattern} {top} is very stylish", 1.0),
        ("your {shoes} go well with the {bottom_color} {bottom}", 1.0),
        ("your {top_color} {top} suits you", 1.0),
        ("i love the {pattern} {top}", 1.0),
        ("i like how the {top} matches the {shoes}", 1.0),
        ("i love the {shoes} with the {bottom_color} {bottom}", 1.0),
        ("i like the {top_color} {top} with {bottom_color} {bottom}", 1.0),
    ],
    "TIP": [
        ("swap your {top_color} {top} for a {alt_top_color} {top}", 3.0),
        ("swap your {bottom} for {alt_bottom_color} {bottom}", 1.0),
        ("swap the {pattern} {top} for a plain one", 1.0),
        ("swap your {shoes} for {alt_shoes}", 1.0),
        ("try a {alt_top} instead of the {top}", 1.0),
        ("try {alt_bottom_color} {shoes} with this {bottom}", 1.0),
        ("try {alt_shoes} instead of {shoes}", 1.0),
        ("try to tuck in your {pattern} {top}", 1.0),
        ("add a {alt_pattern} scarf to the {top_color} {top}", 1.0),
        ("add a {alt_top_color} belt to your {bottom}", 1.0),
        ("add {alt_bottom_color} socks to the {shoes}", 1.0),
        ("add a {alt_top_color} hat to match the {shoes}", 1.0),
    ],
}

GENERIC_TEMPLATES = {
    "GOOD": [
        ("you look great", 0.4),
        ("what a nice outfit", 0.35),
        ("so stylish", 0.25),
    ],
    "TIP": [
        ("some accessories would help", 0.4),
        ("maybe wear a belt", 0.35),
        ("consider a different color", 0.25),
    ],
}

_FUNCTION_WORDS = {
    "DET": ["the", "a", "this", "some"],
    "PRON": ["your", "you", "i", "one", "what"],
    "PREP": ["on", "with", "of", "for", "in", "instead", "to"],
    "CONJ": ["and"],
    "VERB": ["looks", "love", "fit", "goes", "go", "suits", "look", "like", "matches",
             "works", "is", "swap", "try", "add", "would", "help", "tuck", "match",
             "wear", "consider"],
    "ADJ": ["great", "nice", "stylish", "different", "plain"],
    "NOUN": ["outfit", "combination", "scarf", "belt", "socks", "hat", "accessories",
             "color"],
    "OTHER": [",", "well", "together", "very", "how", "so", "maybe"],
}

_SLOT_POS = {"top": "NOUN", "bottom": "NOUN", "shoes": "NOUN",
             "top_color": "ADJ", "bottom_color": "ADJ", "pattern": "ADJ"}

MAX_SENTENCE_TOKENS = 20

_FIELD = re.compile(r"\{(alt_)?(\w+?)\}")


class SynthConfigError(ValueError):
    pass


def build_lexicon(inventory=None):
    """Part-of-speech map covering every word the generator can emit."""
    inventory = inventory or DEFAULT_INVENTORY
    lex = {}
    for tag, words in _FUNCTION_WORDS.items():
        for w in words:
            lex[w] = tag
    for slot, values in inventory.items():
        for v in values:
            lex[v] = _SLOT_POS[slot]
    return lex


@dataclass
class SynthConfig:
    grid_h: int = 7
    grid_w: int = 14
    depth: int = 32
    n_train: int = 2000
    n_eval: int = 100
    sentences_per_image: int = 5
    refs_per_eval_image: int = 15
    generic_rate: float = 0.3
    feedback_type: str = "GOOD"
    signal: float = 1.0
    noise: float = 0.5
    clarity_min: float = 0.2  # per-image signal scale is drawn from U(clarity_min, 1)
    inventory: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_INVENTORY.items()})

    def to_dict(self):
        return asdict(self)


def _template_arity(template):
    need = {}
    for alt, slot in _FIELD.findall(template):
        need[slot] = max(need.get(slot, 1), 2 if alt else 1)
    return need


def _validate(config):
    if config.feedback_type not in FEEDBACK_TYPES:
        raise SynthConfigError(f"feedback_type must be one of {FEEDBACK_TYPES}")
    if not 0.0 <= config.generic_rate <= 1.0:
        raise SynthConfigError("generic_rate must lie in [0, 1]")
    if config.grid_h < 2 or config.grid_w < 3 or config.depth < 1:
        raise SynthConfigError("grid must be at least 2x3 with positive depth")
    if config.refs_per_eval_image < 2 and config.n_eval > 0:
        raise SynthConfigError("evaluation images need at least 2 references")
    if not 0.0 <= config.clarity_min <= 1.0:
        raise SynthConfigError("clarity_min must lie in [0, 1]")
    if config.sentences_per_image < 1:
        raise SynthConfigError("sentences_per_image must be positive")
    for template, _ in SPECIFIC_TEMPLATES[config.feedback_type]:
        for slot, need in _template_arity(template).items():
            have = len(config.inventory.get(slot, ()))
            if have < need:
                raise SynthConfigError(
                    f"slot {slot!r} has {have} values but template {template!r} needs {need}")


def slot_regions(h, w):
    """Disjoint cell index sets, one per slot, on an ``h`` x ``w`` grid."""
    body_rows = h - 1 if h > 2 else h
    row_cuts = [0, body_rows // 2, body_rows]
    col_cuts = [0, w // 3, 2 * w // 3, w]
    regions = {}
    for slot, (r, c) in SLOT_LAYOUT.items():
        cells = [i * w + j
                 for i in range(row_cuts[r], row_cuts[r + 1])
                 for j in range(col_cuts[c], col_cuts[c + 1])]
        regions[slot] = np.array(cells, dtype=np.int64)
    return regions


def _fill(template, attrs, inventory, rng):
    def sub(m):
        alt, slot = m.group(1), m.group(2)
        if not alt:
            return attrs[slot]
        choices = [v for v in inventory[slot] if v != attrs[slot]]
        return choices[rng.integers(len(choices))]

    return _FIELD.sub(sub, template).split()


def _pick(weighted, rng):
    w = np.array([x[1] for x in weighted], dtype=np.float64)
    return weighted[rng.choice(len(weighted), p=w / w.sum())][0]


def is_generic(tokens, feedback_type="GOOD"):
    return " ".join(tokens) in {t for t, _ in GENERIC_TEMPLATES[feedback_type]}


def _sentences(attrs, count, config, rng):
    out = []
    specific = SPECIFIC_TEMPLATES[config.feedback_type]
    generic = GENERIC_TEMPLATES[config.feedback_type]
    for _ in range(count):
        if rng.random() < config.generic_rate:
            toks = _pick(generic, rng).split()
        else:
            toks = _fill(_pick(specific, rng), attrs, config.inventory, rng)
        assert len(toks) <= MAX_SENTENCE_TOKENS
        out.append(toks)
    return out


def generate_synthetic_corpus(config=None, seed=0):
    """Return ``(train_examples, eval_examples, lexicon)``; deterministic in ``seed``.

    Grids and attributes depend only on the seed and geometry, so GOOD and
    TIP corpora generated with the same seed describe the same images.
    """
    config = config or SynthConfig()
    _validate(config)
    root = np.random.SeedSequence(seed)
    proto_ss, image_ss, text_ss = root.spawn(3)
    proto_rng = np.random.default_rng(proto_ss)
    image_rng = np.random.default_rng(image_ss)
    text_rng = np.random.default_rng(
        text_ss.spawn(len(FEEDBACK_TYPES))[FEEDBACK_TYPES.index(config.feedback_type)])

    h, w, d = config.grid_h, config.grid_w, config.depth
    regions = slot_regions(h, w)
    slots = list(SLOT_LAYOUT)
    prototypes = {}
    for slot in slots:
        p = proto_rng.standard_normal((len(config.inventory[slot]), d))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        prototypes[slot] = p * config.signal * np.sqrt(d) / 2.0

    def make(prefix, index, n_sent):
        attrs_idx = {s: int(image_rng.integers(len(config.inventory[s]))) for s in slots}
        clarity = image_rng.uniform(config.clarity_min, 1.0)
        grid = config.noise * image_rng.standard_normal((h * w, d))
        for s in slots:
            grid[regions[s]] += clarity * prototypes[s][attrs_idx[s]]
        grid = grid.reshape(h, w, d).astype(np.float32).astype(np.float64)
        attrs = {s: config.inventory[s][i] for s, i in attrs_idx.items()}
        sents = _sentences(attrs, n_sent, config, text_rng)
        return Example(f"{prefix}{index:05d}", config.feedback_type, sents, grid)

    train = [make("train", i, config.sentences_per_image) for i in range(config.n_train)]
    evals = [make("eval", i, config.refs_per_eval_image) for i in range(config.n_eval)]
    return train, evals, build_lexicon(config.inventory)
