"""Noun-phrase chunking over a closed POS lexicon and the repetition rules.

Chunk grammar (over tags): ``DET? (ADJ|NOUN|NUM)* NOUN+``, longest match,
head = last noun. Possessive pronouns count as determiners.
"""

import re
from dataclasses import dataclass, field

POSSESSIVES = frozenset({"my", "your", "his", "her", "its", "our", "their"})

WORD_REPEAT_IN_NP = "word-repeat-in-NP"
NOUN_REPEAT_GLOBAL = "noun-repeat-global"
FULL_NP_REPEAT = "full-NP-repeat"
NONE = "none"

_TAG_CODE = {"DET": "D", "ADJ": "A", "NOUN": "N", "NUM": "M"}
_NP = re.compile(r"D?[ANM]*N")


@dataclass(frozen=True)
class NounPhrase:
    start: int
    end: int
    head: int
    has_det: bool = False

    def tokens(self, sentence):
        return tuple(sentence[self.start:self.end])

    def content(self, sentence):
        """Tokens without the leading determiner."""
        return tuple(sentence[self.start + self.has_det:self.end])


@dataclass(frozen=True)
class FilterVerdict:
    valid: bool
    violated_rule: str = NONE
    evidence: tuple = field(default=())


def _code(token, lexicon):
    tag = lexicon.get(token, "OTHER")
    if tag == "PRON" and token in POSSESSIVES:
        return "D"
    return _TAG_CODE.get(tag, "x")


def chunk_noun_phrases(sentence, lexicon):
    """Maximal noun-phrase spans of ``sentence`` (a token list)."""
    codes = "".join(_code(t, lexicon) for t in sentence)
    return [NounPhrase(m.start(), m.end(), m.end() - 1, codes[m.start()] == "D")
            for m in _NP.finditer(codes)]


def validate_sentence(sentence, feedback_type, lexicon):
    """Apply the repetition rules; report the first one violated.

    A: no token twice inside one noun phrase (both types).
    B: GOOD only, no noun appears in two different noun phrases.
    C: TIP only, no two noun phrases are identical once determiners are dropped.
    """
    nps = chunk_noun_phrases(sentence, lexicon)

    for np_ in nps:
        toks = np_.tokens(sentence)
        seen = set()
        for tok in toks:
            if tok in seen:
                return FilterVerdict(False, WORD_REPEAT_IN_NP, ((np_.start, np_.end),))
            seen.add(tok)

    if feedback_type == "GOOD":
        owner = {}
        for k, np_ in enumerate(nps):
            for i in range(np_.start, np_.end):
                tok = sentence[i]
                if lexicon.get(tok) != "NOUN":
                    continue
                if tok in owner and owner[tok] != k:
                    other = nps[owner[tok]]
                    return FilterVerdict(False, NOUN_REPEAT_GLOBAL,
                                         ((other.start, other.end), (np_.start, np_.end)))
                owner.setdefault(tok, k)
    elif feedback_type == "TIP":
        seen = {}
        for np_ in nps:
            key = np_.content(sentence)
            if key in seen:
                other = seen[key]
                return FilterVerdict(False, FULL_NP_REPEAT,
                                     ((other.start, other.end), (np_.start, np_.end)))
            seen[key] = np_
    else:
        raise ValueError(f"unknown feedback type {feedback_type!r}")
    return FilterVerdict(True)
