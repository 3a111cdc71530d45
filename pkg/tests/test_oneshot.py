import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arcomp import ndcore as nd
from arcomp.data import make_toy_dataset
from arcomp.errors import ConfigError, DimensionError
from arcomp.gradcheck import check_gradients
from arcomp.model import ArcModel, compare, symmetric_similarity
from arcomp.oneshot import (EvalResult, Episode, FullContextArc, FullContextHead, NaiveArc, RandomClassifier,
                            cosine_classify, episode_rng, episodes, evaluate_oneshot, full_context_classify,
                            knn_classify, naive_scores, oracle_classify, pair_embeddings, pick, sample_episode,
                            score_records, wilson_interval, write_report)
from arcomp.training import episode_ce_loss


def check_episode(ep: Episode, within: bool = True) -> None:
    ds = ep.dataset
    classes = ds.character[ep.support_items]
    assert len(set(classes.tolist())) == ep.way
    assert int(np.sum(classes == ds.character[ep.test_item])) == 1
    assert classes[ep.true_index] == ds.character[ep.test_item]
    support_drawers = set(ds.drawer[ep.support_items].tolist())
    assert len(support_drawers) == 1
    assert ds.drawer[ep.test_item] not in support_drawers
    assert ep.test_item not in ep.support_items
    if within:
        assert len(set(ds.alphabet[ep.support_items].tolist())) == 1


@pytest.fixture(scope="module")
def toy():
    return make_toy_dataset(6, 5, 8, seed=3)


class TestSampling:
    def test_within_omniglot(self, omniglot_meta):
        ep = sample_episode(omniglot_meta, 20, "within", np.random.default_rng(0))
        assert ep.way == 20 and ep.support_images.shape == (20, 1, 1)
        check_episode(ep)

    def test_across(self, omniglot_meta):
        rng = np.random.default_rng(1)
        alphabets = set()
        for _ in range(50):
            ep = sample_episode(omniglot_meta, 20, "across", rng)
            check_episode(ep, within=False)
            alphabets |= set(omniglot_meta.alphabet[ep.support_items].tolist())
        assert len(alphabets) > 20

    def test_two_class_exhaustion(self):
        ds = make_toy_dataset(2, 4, 8)
        ep = sample_episode(ds, 2, "within", np.random.default_rng(0))
        assert sorted(ep.support_classes.tolist()) == [0, 1]

    def test_shortfall_named(self, toy):
        with pytest.raises(ConfigError, match="14 short"):
            sample_episode(toy, 20, "within", np.random.default_rng(0))
        with pytest.raises(ConfigError, match="14 short"):
            sample_episode(toy, 20, "across", np.random.default_rng(0))
        with pytest.raises(ConfigError):
            sample_episode(toy, 3, "sideways", np.random.default_rng(0))

    def test_support_frequency_binomial(self):
        # one alphabet of 30 characters: each appears in a 20-way support with p = 20/30
        ds = make_toy_dataset(30, 3, 4, seed=0)
        ds.alphabet[:] = 0
        ds._index = None
        n = 10_000
        counts = np.zeros(30)
        for i in range(n):
            ep = sample_episode(ds, 20, "within", episode_rng(5, i))
            counts[ep.support_classes] += 1
        p = 20 / 30
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma), counts

    def test_streams_are_per_episode(self, omniglot_meta):
        a = episodes(omniglot_meta, 5, seed=9)
        b = [sample_episode(omniglot_meta, 20, "within", episode_rng(9, i), index=i) for i in (4, 2)]
        assert a[4].support_items.tolist() == b[0].support_items.tolist()
        assert a[2].test_item == b[1].test_item

    def test_many_invariants(self, omniglot_meta):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            check_episode(sample_episode(omniglot_meta, 20, "within", rng))


def scripted_episode(toy, way=3):
    return sample_episode(toy, way, "within", np.random.default_rng(4))


class TestNaive:
    def test_pick(self):
        assert pick([0.1, 0.9, 0.3]) == 1
        assert pick([0.4, 0.4, 0.4]) == 0
        assert pick([0.2, 0.7, 0.7]) == 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=20), st.floats(0.1, 2), st.floats(-3, 3))
    def test_monotone_invariance(self, scores, scale, shift):
        s = np.array(scores, dtype=float)
        assert pick(s) == pick(np.exp(scale * s + shift)) == pick(np.tanh(s / 100))

    def test_swap_invariance(self, toy):
        model = ArcModel(S=8, N=3, glimpses=2, hidden=8, seed=1)
        model.head_w.data = np.random.default_rng(2).normal(size=8)
        ep = scripted_episode(toy, 4)
        scores = naive_scores(model, ep)
        swapped = symmetric_similarity(model, ep.support_images, np.broadcast_to(ep.test_image, (4, 8, 8)))
        np.testing.assert_array_equal(scores, swapped)
        assert NaiveArc(model)(ep) == ep.class_at(pick(swapped))

    def test_untrained_model_ties_to_first(self, toy):
        model = ArcModel(S=8, N=3, glimpses=2, hidden=8)
        model.head_w.data[:] = 0.0
        ep = scripted_episode(toy, 4)
        assert NaiveArc(model)(ep) == ep.class_at(0)


class TestFullContext:
    def test_zero_weights_uniform(self):
        head = FullContextHead(8, 8, seed=0)
        emb = np.random.default_rng(0).normal(size=(2, 5, 8))
        np.testing.assert_allclose(head.distribution(emb).data, 0.2, atol=1e-15)

    def test_way_one(self):
        head = FullContextHead(8, 4, seed=0)
        head.v.data = np.ones(4)
        assert head.distribution(np.ones((1, 1, 8))).data.tolist() == [[1.0]]

    def test_shape_checked(self):
        with pytest.raises(DimensionError):
            FullContextHead(8, 4).scores(np.zeros((2, 3, 5)))

    def test_valid_distribution(self, toy):
        model = ArcModel(S=8, N=3, glimpses=2, hidden=8, seed=2)
        head = FullContextHead(8, 8, seed=1)
        rng = np.random.default_rng(3)
        for p in head.parameters().values():
            p.data = rng.normal(size=p.data.shape)
        for i in range(5):
            ep = sample_episode(toy, 4, "within", episode_rng(0, i))
            dist = full_context_classify(model, head, ep)
            assert dist.shape == (4,) and np.all(dist >= 0)
            assert abs(dist.sum() - 1.0) <= 1e-12
            assert FullContextArc(model, head)(ep) == ep.class_at(int(np.argmax(dist)))

    def test_gradient(self, toy):
        model = ArcModel(S=8, N=3, glimpses=2, hidden=8, seed=2)
        rng = np.random.default_rng(7)
        model.head_w.data = rng.normal(size=8)
        model.projection.W.data = rng.normal(scale=0.5, size=(3, 8))
        head = FullContextHead(8, 8, seed=1)
        for p in head.parameters().values():
            p.data = rng.normal(scale=0.5, size=p.data.shape)
        eps = [sample_episode(toy, 3, "within", episode_rng(1, i)) for i in range(2)]
        params = {**head.parameters(), **model.parameters()}

        def loss():
            emb = pair_embeddings(model, eps)
            return episode_ce_loss(head.distribution(emb), [ep.true_index for ep in eps])

        errors = check_gradients(loss, params)
        assert max(errors.values()) < 1e-4, errors

    def test_embeddings_average_both_orders(self, toy):
        model = ArcModel(S=8, N=3, glimpses=2, hidden=8, seed=2)
        ep = scripted_episode(toy, 3)
        with nd.no_grad():
            emb = pair_embeddings(model, [ep]).data[0]
        for j in range(3):
            _, ab = compare(model, ep.support_images[j], ep.test_image)
            _, ba = compare(model, ep.test_image, ep.support_images[j])
            np.testing.assert_allclose(emb[j], (ab + ba) / 2, atol=1e-12)


class TestEvaluate:
    def test_oracle(self, toy):
        result = evaluate_oneshot(oracle_classify, toy, 50, way=5)
        assert result.accuracy == 1.0 and result.count == 50

    def test_random_chance(self, omniglot_meta):
        result = evaluate_oneshot(RandomClassifier(3), omniglot_meta, 10_000, seed=1, way=20)
        assert result.ci_low <= 0.05 <= result.ci_high
        assert abs(result.accuracy - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / 10_000)

    def test_wilson_reference(self):
        # closed-form Wilson score interval
        k, n, z = 37, 120, 1.959963984540054
        p = k / n
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        lo, hi = wilson_interval(k, n)
        assert lo == pytest.approx(centre - half, abs=1e-12)
        assert hi == pytest.approx(centre + half, abs=1e-12)

    def test_workers_do_not_change_records(self, toy):
        single = evaluate_oneshot(cosine_classify, toy, 40, seed=2, way=4)
        threaded = evaluate_oneshot(cosine_classify, toy, 40, seed=2, way=4, workers=4)
        assert single.records == threaded.records

    def test_knn_finds_identical(self, toy):
        ep = scripted_episode(toy, 5)
        copy = Episode(toy, ep.support_items.copy(), int(ep.support_items[2]), 2)
        assert knn_classify(copy) == copy.class_at(2)

    def test_empty(self, toy):
        with pytest.raises(ConfigError):
            evaluate_oneshot(oracle_classify, toy, 0)
        with pytest.raises(ConfigError):
            score_records([])

    def test_report(self, toy, tmp_path):
        result = evaluate_oneshot(knn_classify, toy, 7, seed=0, way=3)
        write_report(result, tmp_path / "r.txt", tmp_path / "s.txt")
        lines = (tmp_path / "r.txt").read_text().splitlines()
        assert lines[0].startswith("#") and len(lines) == 9
        for idx, line in enumerate(lines[1:8]):
            i, p, t, c = (int(x) for x in line.split(", "))
            assert i == idx and c == int(p == t)
        assert lines[-1].startswith("# summary: accuracy=")
        kv = dict(line.split("=") for line in (tmp_path / "s.txt").read_text().splitlines())
        assert int(kv["episodes"]) == 7 and float(kv["accuracy"]) == result.accuracy
        assert isinstance(result, EvalResult)
