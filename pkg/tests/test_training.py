import numpy as np
import pytest

from mmicap import autodiff as ad
from mmicap import models, synth, training
from mmicap.corpus import build_vocabulary
from mmicap.training import Adam, TrainConfig
from helpers import small_model


@pytest.fixture(scope="module")
def tiny():
    cfg = synth.SynthConfig(grid_h=3, grid_w=3, depth=4, n_train=12, n_eval=3,
                            refs_per_eval_image=3)
    train, evals, lex = synth.generate_synthetic_corpus(cfg, seed=0)
    vocab = build_vocabulary([s for ex in train for s in ex.sentences], lex, min_count_exclusive=0)
    return train, evals, vocab


def small_cfg(**kw):
    base = dict(epochs=2, images_per_batch=4, sentences_per_image=2, hidden=8, embed=8, feat=8,
                att=8, eval_every=1, eval_beam=2, freeze_encoder_epochs=1, learning_rate=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_matches_hand_update():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    g = np.array([0.5, -1.0])
    opt.step({"p": g})
    # first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    opt.step({"p": g})
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    upd = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, np.array([0.9, -1.9]) - upd, atol=1e-12)


def test_adam_rejects_non_finite_and_names_param():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(training.TrainingError, match="weights"):
        Adam({"weights": p}).step({"weights": np.array([np.nan, 0.0])})


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = training.clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(1.0)
    same, _ = training.clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_pad_batch():
    ids, lengths = training.pad_batch([[0, 5, 1], [0, 1]], 1)
    np.testing.assert_array_equal(ids, [[0, 5, 1], [0, 1, 1]])
    np.testing.assert_array_equal(lengths, [3, 2])


def test_teacher_forcing_loss_matches_step_scores():
    m = small_model("topdown")
    rng = np.random.default_rng(0)
    grids = rng.standard_normal((2, 2, 3, 5))
    seqs = [[0, 3, 4, 1], [0, 5, 1]]
    ids, lengths = training.pad_batch(seqs, 1)
    with ad.no_grad():
        loss = float(training.teacher_forcing_loss(m, ids, lengths, grids).data)
    want = -sum(sum(models.step_log_probs(m, s, g)) for s, g in zip(seqs, grids)) / 5
    assert loss == pytest.approx(want, abs=1e-10)


def test_dropout_changes_loss_only_when_enabled():
    m = small_model("lm")
    ids, lengths = training.pad_batch([[0, 3, 4, 1]], 1)
    with ad.no_grad():
        a = float(training.teacher_forcing_loss(m, ids, lengths).data)
        b = float(training.teacher_forcing_loss(m, ids, lengths, rate=0.5,
                                                rng=np.random.default_rng(0)).data)
    assert a != b


def test_frozen_encoder_is_untouched_then_trains(tiny):
    train, evals, vocab = tiny
    init = models.init_model("topdown", len(vocab), feat_in=4, hidden=8, embed=8, feat=8, att=8)
    frozen, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=1))
    for name in models.encoder_param_names(init):
        np.testing.assert_array_equal(frozen.model.params[name].data, init.params[name].data)
    assert not np.array_equal(frozen.model.params["out.W"].data, init.params["out.W"].data)
    thawed, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=2))
    assert not np.array_equal(thawed.model.params["proj.W"].data, init.params["proj.W"].data)


def test_training_is_deterministic(tiny):
    train, evals, vocab = tiny
    a, rows_a = training.train_captioner(train, evals, vocab, small_cfg())
    b, rows_b = training.train_captioner(train, evals, vocab, small_cfg())
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)
    assert [r["train_loss"] for r in rows_a] == [r["train_loss"] for r in rows_b]
    c, _ = training.train_captioner(train, evals, vocab, small_cfg(seed=1))
    assert not np.array_equal(a.model.params["out.W"].data, c.model.params["out.W"].data)


def test_best_checkpoint_by_cider(tiny):
    train, evals, vocab = tiny
    best, rows = training.train_captioner(train, evals, vocab, small_cfg(epochs=3))
    scores = [r["eval_cider_d"] for r in rows]
    assert best.metric == max(scores)
    assert best.epoch == scores.index(max(scores)) + 1
    assert set(rows[0]) == {"epoch", "train_loss", "eval_cider_d", "wall_seconds"}


def test_fc_baseline_trains(tiny):
    train, evals, vocab = tiny
    best, rows = training.train_captioner(train, evals, vocab, small_cfg(), kind="fc")
    assert best.model.kind == "fc" and len(rows) == 2


def test_target_loss_stops_early(tiny):
    train, _, vocab = tiny
    _, rows = training.train_captioner(train, [], vocab, small_cfg(epochs=5, target_loss=100.0))
    assert len(rows) == 1


def test_transfer_copies_encoder_and_checks_vocab(tiny):
    train, evals, vocab = tiny
    src, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=2))
    dst, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=1), init=src)
    # one frozen epoch: the encoder equals the transferred one exactly
    np.testing.assert_array_equal(dst.model.params["proj.W"].data, src.model.params["proj.W"].data)
    src.vocab_hash = "different"
    with pytest.raises(training.CheckpointError):
        training.train_captioner(train, [], vocab, small_cfg(epochs=1), init=src)
    training.train_captioner(train, [], vocab, small_cfg(epochs=1), init=src,
                             allow_vocab_mismatch=True)


def test_transfer_shape_mismatch(tiny):
    train, _, vocab = tiny
    other = models.init_model("topdown", len(vocab), feat_in=4, hidden=8, embed=8, feat=6, att=8)
    target = models.init_model("topdown", len(vocab), feat_in=4, hidden=8, embed=8, feat=8, att=8)
    with pytest.raises(training.TrainingError, match="proj"):
        training.transfer_encoder_weights(other, target)


def test_lm_training_lowers_perplexity(tiny):
    train, _, vocab = tiny
    sents = [s for ex in train for s in ex.sentences]
    best, rows = training.train_lm(sents, vocab, small_cfg(epochs=4))
    assert best.metric_name == "perplexity"
    assert best.metric == min(r["heldout_perplexity"] for r in rows)
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]


def test_untrained_lm_perplexity_near_vocab_size():
    m = models.init_model("lm", 20, hidden=8, embed=8)
    m.params["out.W"].data[...] = 0.0
    assert training.perplexity(m, [[0, 3, 4, 1]]) == pytest.approx(20.0)


def test_checkpoint_roundtrip(tmp_path, tiny):
    train, _, vocab = tiny
    best, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=1))
    path = tmp_path / "m.ckpt"
    training.save_checkpoint(best, path)
    back = training.load_checkpoint(path, vocab_hash=vocab.hash())
    assert back.model.kind == best.model.kind and back.epoch == best.epoch
    for k in best.model.params:
        np.testing.assert_array_equal(back.model.params[k].data, best.model.params[k].data)
    training.save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path, tiny):
    train, _, vocab = tiny
    best, _ = training.train_captioner(train, [], vocab, small_cfg(epochs=1))
    path = tmp_path / "m.ckpt"
    training.save_checkpoint(best, path)
    with pytest.raises(training.CheckpointError, match="hash"):
        training.load_checkpoint(path, vocab_hash="0" * 64)
    blob = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-8])
    with pytest.raises(training.CheckpointError, match="truncated"):
        training.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m2.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(training.CheckpointError, match="magic"):
        training.load_checkpoint(tmp_path / "m2.ckpt")


@pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(images_per_batch=0)])
def test_invalid_train_config(kw):
    with pytest.raises(training.TrainingError):
        TrainConfig(**kw)


def test_empty_training_set(tiny):
    _, _, vocab = tiny
    with pytest.raises(training.TrainingError):
        training.train_captioner([], [], vocab, small_cfg())


def test_adam_zero_gradient_leaves_params():
    p = ad.Tensor(np.array([1.5, -0.5]), requires_grad=True)
    Adam({"p": p}, lr=0.1).step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.5, -0.5])


def test_adam_quadratic_bowl():
    x = ad.Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.01)
    for _ in range(2000):
        opt.step({"x": 2 * x.data})
    assert abs(x.data[0]) < 1e-3


def test_uniform_model_loss_is_log_vocab():
    m = models.init_model("topdown", 30, feat_in=5, hidden=8, embed=8, feat=8, att=8)
    m.params["out.W"].data[...] = 0.0
    ids, lengths = training.pad_batch([[0, 4, 5, 6, 1]], 1)
    grids = np.random.default_rng(0).standard_normal((1, 2, 3, 5))
    with ad.no_grad():
        loss = float(training.teacher_forcing_loss(m, ids, lengths, grids).data)
    assert loss == pytest.approx(np.log(30), rel=0.05)


def test_frozen_gradients_are_exactly_zero(tiny):
    train, _, vocab = tiny
    m = models.init_model("topdown", len(vocab), feat_in=4, hidden=8, embed=8, feat=8, att=8)
    ids, lengths = training.pad_batch([vocab.encode(train[0].sentences[0])], vocab.eos_id)
    frozen = set(models.encoder_param_names(m))
    for k, p in m.params.items():
        p.requires_grad = k not in frozen
    with ad.Tape() as tape:
        loss = training.teacher_forcing_loss(m, ids, lengths, train[0].grid[None])
    g = ad.backward(tape, loss, m.param_list())
    for k in frozen:
        assert not np.any(g[m.params[k]])
    assert np.any(g[m.params["out.W"]])


def test_loss_decreases_over_first_steps(tiny):
    train, _, vocab = tiny
    cfg = small_cfg(learning_rate=1e-3, dropout=0.0)
    m = models.init_model("topdown", len(vocab), feat_in=4, hidden=8, embed=8, feat=8, att=8)
    opt = Adam(m.params, lr=1e-3)
    seqs = [vocab.encode(s) for ex in train[:4] for s in ex.sentences[:3]]
    grids = np.stack([ex.grid for ex in train[:4] for _ in range(3)])
    ids, lengths = training.pad_batch(seqs, vocab.eos_id)
    losses = [training._train_step(m, opt, ids, lengths, grids, cfg, None) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_lm_single_sentence_overfits(tiny):
    _, _, vocab = tiny
    sent = ["you", "look", "great"]
    best, _ = training.train_lm([sent], vocab, small_cfg(epochs=300, learning_rate=3e-2,
                                                          dropout=0.0))
    assert best.metric < 1.05


def test_lm_heldout_perplexity_decreases_early(tiny):
    train, _, vocab = tiny
    sents = [s for ex in train for s in ex.sentences]
    _, rows = training.train_lm(sents, vocab, small_cfg(epochs=5, learning_rate=3e-3))
    ppl = [r["heldout_perplexity"] for r in rows]
    assert all(b < a for a, b in zip(ppl, ppl[1:]))
