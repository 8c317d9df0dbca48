import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dummyproto import data, evaluation
from dummyproto.errors import DataError, UsageError
from dummyproto.model import ModelHyper, ProtoModel
from dummyproto.pipeline import FeatureStore

from reference_impls import auroc_pairwise


class TestClassify:
    def test_dummy_column_excluded(self):
        probs = np.array([[0.1, 0.2, 0.3, 0.4]])
        assert evaluation.classify(probs, n_way=3).tolist() == [2]

    def test_uniform_ties_to_first(self):
        probs = np.full((1, 4), 0.25)
        assert evaluation.classify(probs, n_way=3).tolist() == [0]

    def test_one_hot(self):
        probs = np.array([[0.0, 1.0, 0.0]])
        assert evaluation.classify(probs, n_way=3).tolist() == [1]


class TestOpensetDecide:
    def test_above_threshold_is_unknown(self):
        assert evaluation.openset_decide(0.9, 0.5) == "unknown"

    def test_exactly_at_threshold_is_known(self):
        assert evaluation.openset_decide(0.5, 0.5) == "known"

    def test_confident_known_stays_known(self):
        assert evaluation.openset_decide(1e-12, 0.1) == "known"


class TestAuroc:
    def test_perfect_separation(self):
        assert evaluation.auroc([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_all_ties_give_half(self):
        assert evaluation.auroc([0.3, 0.3, 0.3], [0.3, 0.3]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            evaluation.auroc([], [0.5])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_matches_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        nk, nu = int(rng.integers(1, 200)), int(rng.integers(1, 200))
        # quantized scores so ties actually occur
        known = rng.integers(0, 25, nk) / 10.0
        unknown = rng.integers(0, 25, nu) / 10.0
        assert evaluation.auroc(known, unknown) == pytest.approx(
            auroc_pairwise(known, unknown), abs=1e-12
        )

    def test_complement_symmetry(self, rng):
        known = rng.standard_normal(40)
        unknown = rng.standard_normal(30)
        a = evaluation.auroc(known, unknown)
        b = evaluation.auroc(unknown, known)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_monotone_transform(self, rng):
        known = rng.standard_normal(25)
        unknown = rng.standard_normal(35)
        base = evaluation.auroc(known, unknown)
        f = lambda v: np.exp(3.0 * np.asarray(v)) + 1.0  # noqa: E731
        assert evaluation.auroc(f(known), f(unknown)) == pytest.approx(base, abs=1e-12)


class TestScores:
    def test_rule_orientation(self, rng):
        probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.2, 0.6]])
        dist_known = np.array([[0.5, 2.0], [4.0, 3.0]])
        dist_dummy = np.array([0.9, 0.1])
        s = evaluation.open_set_scores("dummy_prob", probs, dist_known, dist_dummy)
        assert s.tolist() == [0.1, 0.6]
        s = evaluation.open_set_scores("max_prob_complement", probs, dist_known, dist_dummy)
        assert np.allclose(s, [0.3, 0.8])
        s = evaluation.open_set_scores("neg_min_distance", probs, dist_known, dist_dummy)
        assert s.tolist() == [0.5, 3.0]
        s = evaluation.open_set_scores("neg_dummy_distance", probs, dist_known, dist_dummy)
        assert s.tolist() == [-0.9, -0.1]

    def test_dummy_rules_need_dummy_model(self):
        probs = np.array([[0.7, 0.3]])
        with pytest.raises(UsageError):
            evaluation.open_set_scores("dummy_prob", probs, np.array([[1.0, 2.0]]), None)
        with pytest.raises(UsageError):
            evaluation.open_set_scores("neg_dummy_distance", probs, np.array([[1.0, 2.0]]), None)

    def test_unknown_rule_rejected(self):
        with pytest.raises(UsageError):
            evaluation.open_set_scores("nope", np.ones((1, 2)), None, None)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_corpus")
    return data.synth_corpus(root, n_classes=14, samples_per_class=8, seed=5)


@pytest.fixture(scope="module")
def tiny_model():
    return ProtoModel(ModelHyper(channels=8, dummy_count=2), seed=3)


class TestEvaluate:
    CFG = data.EpisodeConfig(n_way=2, n_shot=2, n_open=2, queries_per_class=3)

    def test_report_shape_and_determinism(self, tiny_corpus, tiny_model):
        store = FeatureStore(tiny_corpus)
        r1 = evaluation.evaluate(tiny_model, store, "test", self.CFG, 5, "dummy_prob", seed=9)
        r2 = evaluation.evaluate(tiny_model, store, "test", self.CFG, 5, "dummy_prob", seed=9)
        assert r1.episodes == 5 and len(r1.per_episode) == 5
        assert r1.to_json() == r2.to_json()
        assert 0.0 <= r1.accuracy_mean <= 1.0
        assert 0.0 <= r1.auroc_mean <= 1.0
        assert r1.accuracy_ci95 == pytest.approx(1.96 * r1.accuracy_std / np.sqrt(5))

    def test_oracle_scorer_gives_perfect_auroc(self, tiny_corpus, tiny_model, monkeypatch):
        def fake_forward(model, x, labels, n_way, n_shot):
            q = len(labels) - n_way * n_shot
            qlabels = labels[n_way * n_shot :]
            probs = np.zeros((q, n_way + 1))
            probs[np.arange(q), np.minimum(qlabels, n_way)] = 1.0
            dist = np.ones((q, n_way))
            return probs, dist, np.ones(q)

        monkeypatch.setattr(evaluation, "episode_forward", fake_forward)
        store = FeatureStore(tiny_corpus)
        report = evaluation.evaluate(tiny_model, store, "test", self.CFG, 8, "dummy_prob", seed=1)
        assert report.auroc_mean == 1.0
        assert report.auroc_std == 0.0
        assert report.accuracy_mean == 1.0

    def test_dummy_rule_rejected_for_baseline(self, tiny_corpus):
        baseline = ProtoModel(ModelHyper(channels=8, baseline=True), seed=3)
        store = FeatureStore(tiny_corpus)
        with pytest.raises(UsageError):
            evaluation.evaluate(baseline, store, "test", self.CFG, 2, "dummy_prob", seed=1)

    def test_report_files(self, tiny_corpus, tiny_model, tmp_path):
        store = FeatureStore(tiny_corpus)
        report = evaluation.evaluate(tiny_model, store, "val", self.CFG, 3, "max_prob_complement", seed=2)
        report.write(tmp_path / "r.json", tmp_path / "r.csv")
        import json

        payload = json.loads((tmp_path / "r.json").read_text())
        assert payload["episodes"] == 3
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "episode,accuracy,auroc"
        assert len(lines) == 4
