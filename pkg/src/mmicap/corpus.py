"""Text preprocessing, vocabulary, and on-disk corpus formats."""

import hashlib
import json
import re
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPECIALS = (BOS, EOS, UNK)

POS_TAGS = ("NOUN", "ADJ", "DET", "VERB", "PREP", "PRON", "CONJ", "NUM", "OTHER")
FEEDBACK_TYPES = ("GOOD", "TIP")

GRID_MAGIC = b"FGRD"
_GRID_HEADER = struct.Struct("<4sIIII")


class CorpusError(Exception):
    pass


class EmptySentenceError(CorpusError):
    pass


class MissingPOSError(CorpusError):
    pass


class CorpusFormatError(CorpusError):
    pass


_STRIP = "".join(c for c in string.punctuation if c != ",")
_STRIP_TABLE = str.maketrans("", "", _STRIP)


def preprocess_sentence(raw):
    """Lowercase, drop punctuation other than commas, split commas off as tokens."""
    text = raw.lower().translate(_STRIP_TABLE)
    text = re.sub(r"[^\w\s,]", "", text)
    tokens = text.replace(",", " , ").split()
    if not tokens:
        raise EmptySentenceError(f"nothing left after preprocessing {raw!r}")
    return tokens


class Vocabulary:
    """Dense token ids with three specials and a part-of-speech tag per token."""

    def __init__(self, tokens, pos):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.pos = {t: "OTHER" for t in SPECIALS}
        for t in tokens[3:]:
            if t not in pos:
                raise MissingPOSError(f"no part-of-speech entry for {t!r}")
            tag = pos[t]
            if tag not in POS_TAGS:
                raise CorpusError(f"unknown POS tag {tag!r} for {t!r}")
            self.pos[t] = tag

    bos_id = 0
    eos_id = 1
    unk_id = 2

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    @property
    def words(self):
        """Non-special tokens."""
        return self.itos[3:]

    def encode(self, tokens):
        ids = [self.stoi.get(t, self.unk_id) for t in tokens]
        return [self.bos_id] + ids + [self.eos_id]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise CorpusError(f"token id {i} out of range for vocabulary of {len(self)}")
            if i in (self.bos_id, self.eos_id):
                continue
            out.append(self.itos[i])
        return out

    def tag(self, token):
        return self.pos.get(token, "OTHER")

    def to_json(self):
        return {
            "tokens": self.itos,
            "pos": {t: self.pos[t] for t in self.itos},
            "specials": {"bos": BOS, "eos": EOS, "unk": UNK},
        }

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
            return cls(doc["tokens"], doc["pos"])
        except (KeyError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"{path}: malformed vocabulary file ({exc})") from None


def encode(tokens, vocab):
    return vocab.encode(tokens)


def decode(ids, vocab):
    return vocab.decode(ids)


def build_vocabulary(sentences, lexicon, min_count_exclusive=5):
    """Keep tokens seen strictly more than ``min_count_exclusive`` times.

    Token order is by descending count, ties alphabetical, after the specials.
    """
    counts = Counter(t for s in sentences for t in s)
    kept = sorted((t for t, c in counts.items() if c > min_count_exclusive and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    missing = [t for t in kept if t not in lexicon]
    if missing:
        raise MissingPOSError(f"lexicon lacks POS for kept tokens: {', '.join(missing[:10])}")
    return Vocabulary(list(SPECIALS) + kept, lexicon)


# ---------------------------------------------------------------------------
# corpus records
# ---------------------------------------------------------------------------

@dataclass
class Example:
    """One image: its feature grid and tokenized sentences (no framing)."""

    image_id: str
    feedback_type: str
    sentences: list
    grid: np.ndarray = field(repr=False)

    def __eq__(self, other):
        return (isinstance(other, Example)
                and self.image_id == other.image_id
                and self.feedback_type == other.feedback_type
                and self.sentences == other.sentences
                and self.grid.shape == other.grid.shape
                and np.array_equal(self.grid, other.grid))


def encode_sentences(example, vocab):
    return [vocab.encode(s) for s in example.sentences]


def write_grids(path, grids, shape=None):
    grids = list(grids)
    if grids:
        shape = grids[0].shape
    h, w, d = shape if shape is not None else (0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, len(grids), h, w, d))
        for g in grids:
            if g.shape != (h, w, d):
                raise CorpusError(f"grid shape {g.shape} differs from {(h, w, d)}")
            fh.write(np.ascontiguousarray(g, dtype="<f4").tobytes())


def read_grids(path):
    """Return an array (count, H, W, D) of float64 from a grid file."""
    blob = Path(path).read_bytes()
    if len(blob) < _GRID_HEADER.size:
        raise CorpusFormatError(
            f"{path}: truncated header, expected {_GRID_HEADER.size} bytes, got {len(blob)}")
    magic, count, h, w, d = _GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    expected = _GRID_HEADER.size + 4 * count * h * w * d
    if len(blob) != expected:
        raise CorpusFormatError(
            f"{path}: expected {expected} bytes for {count} grids of {h}x{w}x{d}, "
            f"got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_GRID_HEADER.size)
    return data.reshape(count, h, w, d).astype(np.float64)


def save_corpus(examples, path, grid_shape=None):
    """Write ``path`` (JSON lines) and ``path`` with suffix ``.grids``."""
    path = Path(path)
    grid_path = path.with_suffix(".grids")
    write_grids(grid_path, [e.grid for e in examples], shape=grid_shape)
    with open(path, "w") as fh:
        for i, e in enumerate(examples):
            rec = {
                "image_id": e.image_id,
                "feedback_type": e.feedback_type,
                "sentences": [" ".join(s) for s in e.sentences],
                "grid_file": grid_path.name,
                "grid_offset": i,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path):
    path = Path(path)
    grid_cache = {}
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id = str(rec["image_id"])
                ftype = rec["feedback_type"]
                sentences = [s.split() for s in rec["sentences"]]
                grid_file = rec["grid_file"]
                offset = int(rec["grid_offset"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if ftype not in FEEDBACK_TYPES:
                raise CorpusFormatError(f"{path}:{lineno}: unknown feedback_type {ftype!r}")
            if not sentences or any(not s for s in sentences):
                raise CorpusFormatError(f"{path}:{lineno}: empty sentence list or sentence")
            if grid_file not in grid_cache:
                grid_cache[grid_file] = read_grids(path.parent / grid_file)
            grids = grid_cache[grid_file]
            if not 0 <= offset < len(grids):
                raise CorpusFormatError(
                    f"{path}:{lineno}: grid_offset {offset} outside {grid_file} ({len(grids)} grids)")
            examples.append(Example(image_id, ftype, sentences, grids[offset]))
    return examples
