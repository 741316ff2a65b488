"""Tests for the toy fusion reader."""

import numpy as np
import pytest

from rankmask_lab import autodiff as ad
from rankmask_lab import reader as rd
from rankmask_lab import taskgen as tg
from rankmask_lab.errors import ContractError


def task(**overrides):
    base = dict(
        passages=6,
        passage_len=5,
        question_len=4,
        classes=4,
        vocab=30,
        rank_bias=0.5,
        decoy_rate=0.3,
        train_size=12,
        val_size=8,
        test_size=8,
        seed=5,
    )
    base.update(overrides)
    return tg.TaskConfig(**base)


@pytest.fixture()
def setup():
    cfg = task()
    ds = tg.generate(cfg)
    params = rd.ReaderParams.init(cfg.vocab, cfg.classes, rd.ReaderConfig(width=16), seed=2)
    return cfg, ds, params


def swap_passages(ex, i, j):
    passages = list(ex.passages)
    passages[i - 1], passages[j - 1] = passages[j - 1], passages[i - 1]
    pos = ex.evidence_position
    if pos == i:
        pos = j
    elif pos == j:
        pos = i
    return tg.Example(ex.question, tuple(passages), ex.label, pos)


class TestEncode:
    def test_output_shape(self, setup):
        cfg, ds, params = setup
        h = rd.encode(ds.split("train")[0], params)
        assert h.values.shape == (cfg.passages + 1, cfg.passage_len, 16)
        assert h.passages == cfg.passages

    def test_permutation_equivariance(self, setup):
        cfg, ds, params = setup
        ex = ds.split("train")[0]
        h = rd.encode(ex, params).values.data
        h_swapped = rd.encode(swap_passages(ex, 2, 5), params).values.data
        want = h.copy()
        want[[2, 5]] = want[[5, 2]]
        np.testing.assert_allclose(h_swapped, want, atol=1e-12)

    def test_zero_embeddings_collapse_passages(self, setup):
        cfg, ds, params = setup
        params["embed"].data[:] = 0.0
        h = rd.encode(ds.split("train")[0], params).values.data
        for i in range(2, cfg.passages + 1):
            np.testing.assert_array_equal(h[1], h[i])

    def test_vocab_overflow(self, setup):
        cfg, ds, params = setup
        ex = ds.split("train")[0]
        bad = tg.Example(ex.question, ((cfg.vocab,) * cfg.passage_len,) + ex.passages[1:], ex.label, ex.evidence_position)
        with pytest.raises(IndexError):
            rd.encode(bad, params)


class TestPredict:
    def test_valid_log_distribution(self, setup):
        cfg, ds, params = setup
        for ex in ds.split("val"):
            log_probs = rd.predict(rd.encode(ex, params), params)
            assert abs(np.exp(log_probs.data).sum() - 1.0) < 1e-9

    def test_all_passages_zeroed_ignores_passage_content(self, setup):
        cfg, ds, params = setup
        ex1, ex2 = ds.split("train")[0], ds.split("train")[1]
        ranks = list(range(1, cfg.passages + 1))

        def zero_passages(example):
            h = rd.encode(example, params)
            return rd.predict(rd.HiddenStates(ad.zero_slices(h.values, ranks)), params)

        # Same question, different passages: prediction must coincide.
        ex2_same_question = tg.Example(ex1.question, ex2.passages, ex2.label, ex2.evidence_position)
        np.testing.assert_allclose(
            zero_passages(ex1).data, zero_passages(ex2_same_question).data, atol=1e-12
        )

    def test_zeroed_passage_upstream_gradient_is_zero(self, setup):
        cfg, ds, params = setup
        ex = ds.split("train")[0]
        h = rd.encode(ex, params)
        masked = ad.zero_slices(h.values, [3])
        loss = ad.nll_loss(rd.predict(rd.HiddenStates(masked), params), ex.label)
        grads = ad.backward(loss)
        upstream = grads[h.values]
        assert np.array_equal(upstream[3], np.zeros_like(upstream[3]))
        assert np.abs(upstream[1]).max() > 0

    def test_zeroed_passage_gradient_matches_finite_differences(self):
        # A token that only occurs inside the masked passage must get a
        # zero embedding gradient, by backward and by central differences.
        cfg = task(vocab=30, passages=5)
        params = rd.ReaderParams.init(cfg.vocab, cfg.classes, rd.ReaderConfig(width=8, depth=1), seed=3)
        probe_token = cfg.vocab - 1
        question = (tg.QUESTION_MARK, 10, 11, 12)
        passages = tuple(
            tuple(range(13 + 5 * i, 13 + 5 * i + 5))[:5] if i != 2 else (probe_token,) * 5
            for i in range(5)
        )
        passages = tuple(tuple(min(t, cfg.vocab - 2) if i != 2 else t for t in p) for i, p in enumerate(passages))
        ex = tg.Example(question, passages, label=1, evidence_position=1)

        def build(embed):
            h = rd.encode(ex, params)
            masked = ad.zero_slices(h.values, [3])
            return ad.nll_loss(rd.predict(rd.HiddenStates(masked), params), ex.label)

        grads = ad.backward(build(params["embed"]))
        row = grads[params["embed"]][probe_token]
        assert np.array_equal(row, np.zeros_like(row))
        fd = ad.finite_difference_grad(build, params["embed"])
        assert np.abs(fd[probe_token]).max() < 1e-8


class TestLossAndEvaluate:
    def test_loss_matches_nll_of_prediction(self, setup):
        cfg, ds, params = setup
        ex = ds.split("train")[0]
        h = rd.encode(ex, params)
        log_probs = rd.predict(h, params)
        assert rd.loss(ex, h, params).item() == pytest.approx(-log_probs.data[0, ex.label])

    def test_batch_loss_matches_mean_of_singles(self, setup):
        cfg, ds, params = setup
        batch = list(ds.split("train"))[:6]
        batched = rd.batch_loss(batch, params).item()
        singles = [rd.loss(ex, rd.encode(ex, params), params).item() for ex in batch]
        assert batched == pytest.approx(np.mean(singles), rel=1e-12)

    def test_chance_level_two_classes(self):
        cfg = task(classes=2, vocab=20, test_size=400)
        ds = tg.generate(cfg)
        params = rd.ReaderParams.init(cfg.vocab, cfg.classes, rd.ReaderConfig(width=16), seed=9)
        acc = rd.evaluate(ds.split("test"), params)
        sigma = np.sqrt(0.25 / 400)
        assert abs(acc - 0.5) <= 3 * sigma

    def test_zero_all_passages_floors_accuracy(self):
        cfg = task(classes=4, vocab=25, test_size=400)
        ds = tg.generate(cfg)
        params = rd.ReaderParams.init(cfg.vocab, cfg.classes, rd.ReaderConfig(width=16), seed=4)
        from rankmask_lab.masks import eval_mask_ranks

        acc = rd.evaluate(
            ds.split("test"), params, transform=eval_mask_ranks(range(1, cfg.passages + 1))
        )
        sigma = np.sqrt(0.25 * 0.75 / 400)
        assert abs(acc - 0.25) <= 3 * sigma + 0.05

    def test_empty_split_rejected(self, setup):
        cfg, ds, params = setup
        with pytest.raises(ContractError, match="empty"):
            rd.evaluate([], params)

    def test_evaluate_batching_invariant(self, setup):
        cfg, ds, params = setup
        split = ds.split("test")
        assert rd.evaluate(split, params, batch_size=3) == rd.evaluate(split, params, batch_size=64)


class TestTraining:
    def test_loss_monotone_first_50_full_batch_steps(self):
        cfg = task(train_size=10)
        ds = tg.generate(cfg)
        params = rd.ReaderParams.init(cfg.vocab, cfg.classes, rd.ReaderConfig(width=16), seed=1)
        batch = list(ds.split("train"))
        losses = []
        for _ in range(51):
            loss = rd.batch_loss(batch, params)
            losses.append(loss.item())
            grads = ad.backward(loss)
            for t in params.tensors.values():
                t.data -= 0.02 * grads.get(t, 0.0)
        diffs = np.diff(losses)
        assert (diffs < 0).all()


class TestParams:
    def test_count_pure_function_of_dims(self):
        c1 = rd.ReaderParams.init(30, 4, rd.ReaderConfig(width=16), seed=1).param_count()
        c2 = rd.ReaderParams.init(30, 4, rd.ReaderConfig(width=16), seed=99).param_count()
        assert c1 == c2
        rank_on = rd.ReaderParams.init(30, 4, rd.ReaderConfig(width=16, rank_aware_pooling=True), seed=1)
        assert rank_on.param_count() == c1

    def test_copy_is_deep(self, setup):
        cfg, ds, params = setup
        clone = params.copy()
        clone["embed"].data[0, 0] += 1.0
        assert params["embed"].data[0, 0] != clone["embed"].data[0, 0]

    def test_checkpoint_roundtrip_bit_exact(self, setup, tmp_path):
        cfg, ds, params = setup
        logits = np.random.default_rng(0).normal(size=(1, 6))
        path = tmp_path / "ckpt.npz"
        rd.save_checkpoint(path, params, mask_logits=logits, candidates=[(1, 2), (3, 4)])
        loaded, got_logits, cands = rd.load_checkpoint(path)
        assert loaded.config == params.config
        assert loaded.vocab == params.vocab and loaded.classes == params.classes
        for name, t in params.tensors.items():
            assert np.array_equal(loaded[name].data, t.data)
        assert np.array_equal(got_logits, logits)
        assert cands == [(1, 2), (3, 4)]

    def test_checkpoint_without_mask(self, setup, tmp_path):
        cfg, ds, params = setup
        path = tmp_path / "bare.npz"
        rd.save_checkpoint(path, params)
        _, logits, cands = rd.load_checkpoint(path)
        assert logits is None and cands is None
