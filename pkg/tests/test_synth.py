import numpy as np
import pytest

from mmicap import synth
from mmicap.corpus import build_vocabulary


def small(**kw):
    base = dict(n_train=40, n_eval=5, refs_per_eval_image=6)
    base.update(kw)
    return synth.SynthConfig(**base)


def test_deterministic_in_seed():
    a = synth.generate_synthetic_corpus(small(), seed=3)
    b = synth.generate_synthetic_corpus(small(), seed=3)
    c = synth.generate_synthetic_corpus(small(), seed=4)
    assert a[0] == b[0] and a[1] == b[1]
    assert a[0] != c[0]


def test_shapes_and_counts():
    train, evals, lex = synth.generate_synthetic_corpus(small(), seed=0)
    assert len(train) == 40 and len(evals) == 5
    assert train[0].grid.shape == (7, 14, 32)
    assert all(len(ex.sentences) == 5 for ex in train)
    assert all(len(ex.sentences) == 6 for ex in evals)
    words = {t for ex in train + evals for s in ex.sentences for t in s}
    assert words <= set(lex)


def test_good_and_tip_share_images():
    g = synth.generate_synthetic_corpus(small(feedback_type="GOOD"), seed=1)[0]
    t = synth.generate_synthetic_corpus(small(feedback_type="TIP"), seed=1)[0]
    for a, b in zip(g, t):
        np.testing.assert_array_equal(a.grid, b.grid)
    assert [a.sentences for a in g] != [b.sentences for b in t]


def test_generic_rate_is_respected():
    train, _, _ = synth.generate_synthetic_corpus(small(n_train=400), seed=0)
    sents = [s for ex in train for s in ex.sentences]
    rate = np.mean([synth.is_generic(s, "GOOD") for s in sents])
    assert rate == pytest.approx(0.3, abs=0.04)


def test_zero_generic_rate():
    train, _, _ = synth.generate_synthetic_corpus(small(generic_rate=0.0), seed=0)
    assert not any(synth.is_generic(s) for ex in train for s in ex.sentences)


def test_slot_regions_disjoint():
    regions = synth.slot_regions(7, 14)
    cells = np.concatenate(list(regions.values()))
    assert len(cells) == len(set(cells.tolist()))
    assert all(len(r) > 0 for r in regions.values())


def test_specific_sentences_name_planted_values():
    cfg = small(generic_rate=0.0)
    train, _, _ = synth.generate_synthetic_corpus(cfg, seed=0)
    # the planted garment region of each image is closest to the prototype of the named value
    regions = synth.slot_regions(cfg.grid_h, cfg.grid_w)
    tops = cfg.inventory["top"]
    means = {}
    for ex in train:
        mean = ex.grid.reshape(-1, cfg.depth)[regions["top"]].mean(axis=0)
        for s in ex.sentences:
            named = [t for t in s if t in tops]
            if "instead" not in s and named:
                means.setdefault(named[0], []).append(mean)
    centroids = {k: np.mean(v, axis=0) for k, v in means.items()}
    for k, v in means.items():
        for m in v:
            best = min(centroids, key=lambda c: np.linalg.norm(m - centroids[c]))
            assert best == k


def test_vocabulary_builds_from_default_lexicon():
    train, _, lex = synth.generate_synthetic_corpus(small(n_train=200), seed=0)
    vocab = build_vocabulary([s for ex in train for s in ex.sentences], lex)
    assert len(vocab) > 20


@pytest.mark.parametrize("kw", [dict(feedback_type="BAD"), dict(generic_rate=1.5),
                                dict(grid_h=1), dict(refs_per_eval_image=1),
                                dict(sentences_per_image=0)])
def test_invalid_configs(kw):
    with pytest.raises(synth.SynthConfigError):
        synth.generate_synthetic_corpus(small(**kw))


def test_inventory_too_small_for_alt_template():
    inv = {k: list(v) for k, v in synth.DEFAULT_INVENTORY.items()}
    inv["shoes"] = ["boots"]
    with pytest.raises(synth.SynthConfigError, match="shoes"):
        synth.generate_synthetic_corpus(small(feedback_type="TIP", inventory=inv))


def test_full_generic_rate():
    train, _, _ = synth.generate_synthetic_corpus(small(generic_rate=1.0), seed=0)
    assert all(synth.is_generic(s) for ex in train for s in ex.sentences)
