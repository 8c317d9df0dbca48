import numpy as np
import pytest

import dummyproto.tensor as T
from dummyproto import model as M
from dummyproto.checkpoint import load_checkpoint, save_checkpoint
from dummyproto.errors import DataError
from dummyproto.rngs import rng_stream

from reference_impls import softmax_rows


def make_model(channels=16, baseline=False, count=3, gamma=3.0, seed=0):
    hyper = M.ModelHyper(channels=channels, baseline=baseline, dummy_count=count, gamma=gamma)
    return M.ProtoModel(hyper, seed=seed)


class TestEncoder:
    def test_embedding_dim_64_channels(self):
        m = make_model(channels=64, baseline=True)
        assert m.hyper.embedding_dim == 768
        x = np.random.default_rng(0).standard_normal((1, 1, 40, 98))
        with T.no_grad():
            z = m.encode(x, training=False)
        assert z.data.shape == (1, 768)

    def test_embedding_dim_16_channels(self):
        m = make_model(channels=16, baseline=True)
        assert m.hyper.embedding_dim == 16 * 2 * 6 == 192

    def test_eval_mode_is_per_sample(self, rng):
        m = make_model(channels=8, baseline=True)
        x = rng.standard_normal((1, 1, 40, 98))
        batch = np.concatenate([x, x], axis=0)
        with T.no_grad():
            z = m.encode(batch, training=False)
        assert (z.data[0] == z.data[1]).all()


class TestPrototypes:
    def test_single_shot_prototype_is_the_embedding(self):
        emb = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        protos = M.compute_prototypes(emb, np.array([0, 1]), n_way=2, n_shot=1)
        assert (protos.data == emb.data).all()

    def test_mean(self):
        emb = T.Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]))
        protos = M.compute_prototypes(emb, np.array([0, 0]), n_way=1, n_shot=2)
        assert protos.data.tolist() == [[1.0, 1.0]]

    def test_within_class_permutation_invariant(self, rng):
        emb = rng.standard_normal((6, 4))
        labels = np.array([0, 0, 0, 1, 1, 1])
        base = M.compute_prototypes(T.Tensor(emb), labels, 2, 3).data
        shuffled = emb.copy()
        shuffled[[0, 1, 2]] = emb[[2, 0, 1]]
        again = M.compute_prototypes(T.Tensor(shuffled), labels, 2, 3).data
        assert np.abs(base - again).max() < 1e-15

    def test_missing_class_rejected(self):
        emb = T.Tensor(np.zeros((4, 3)))
        with pytest.raises(DataError, match="missing"):
            M.compute_prototypes(emb, np.array([0, 0, 0, 0]), 2, 2)


class TestDummyGenerator:
    def test_permutation_invariance_bitwise(self, rng):
        gen = M.DummyGenerator(emb_dim=12, hidden=7, count=3, rng=rng_stream(0, "init"))
        for trial in range(100):
            c = rng.standard_normal((6, 12))
            with T.no_grad():
                base = gen.generate(T.Tensor(c)).data
                perm = gen.generate(T.Tensor(c[rng.permutation(6)])).data
            assert (base == perm).all()

    def test_identity_weights_hand_trace(self):
        # g1 = identity, projection = identity, one-hot prototype rows:
        # rowwise relu keeps the rows, the max over rows is all-ones
        n = h = 4
        gen = M.DummyGenerator(emb_dim=n, hidden=h, count=1, rng=np.random.default_rng(0))
        gen.w1.data[...] = np.eye(n)
        gen.b1.data[...] = 0.0
        gen.w2.data[...] = np.eye(h)
        gen.b2.data[...] = 0.0
        gen.wg.data[...] = np.eye(h)
        with T.no_grad():
            out = gen.generate(T.Tensor(np.eye(n)))
        assert out.data.tolist() == [[1.0, 1.0, 1.0, 1.0]]

    def test_dummy_count_shapes(self, rng):
        gen = M.DummyGenerator(emb_dim=10, hidden=5, count=3, rng=rng)
        with T.no_grad():
            out = gen.generate(T.Tensor(rng.standard_normal((5, 10))))
        assert out.data.shape == (3, 10)


class TestGumbel:
    def test_inverse_cdf_values(self):
        class FakeRng:
            def __init__(self, vals):
                self.vals = np.asarray(vals)

            def random(self, shape):
                return self.vals.reshape(shape)

        eps = M.sample_gumbel(FakeRng([np.exp(-1.0), np.exp(-np.e)]), (2,))
        assert abs(eps[0] - 0.0) < 1e-12
        assert abs(eps[1] - (-1.0)) < 1e-12

    def test_single_dummy_is_trivial(self, rng):
        q = T.Tensor(rng.standard_normal((4, 6)))
        dummies = T.Tensor(rng.standard_normal((1, 6)))
        for mode in ("train", "eval"):
            rows, probs = M.select_dummy(q, dummies, 1.0, mode, rng=rng)
            assert (probs.data == 1.0).all()
            assert (rows.data == np.repeat(dummies.data, 4, axis=0)).all()

    def test_trainmode_argmax_frequencies_match_softmax(self):
        # Gumbel-max property: P(argmax_l(-d_l + eps_l) = l) = softmax(-d)_l
        d = np.array([[0.3, 1.1, 0.6]])
        want = softmax_rows(-d)[0]
        draws = 100_000
        rng = np.random.default_rng(42)
        q = T.Tensor(np.zeros((draws, 2)), grad_enabled=False)
        eps = M.sample_gumbel(rng, (draws, 3))
        picked = np.argmax(-d + eps, axis=1)
        freq = np.bincount(picked, minlength=3) / draws
        sigma = np.sqrt(want * (1 - want) / draws)
        assert (np.abs(freq - want) <= 3 * sigma).all()

    def test_eval_mode_noise_free_and_first_tie(self, rng):
        q = T.Tensor(np.zeros((2, 3)))
        dummies = T.Tensor(np.zeros((2, 3)))  # both dummies equidistant
        rows, probs = M.select_dummy(q, dummies, 1.0, "eval")
        assert (probs.data == 0.5).all()
        assert (rows.data == dummies.data[0]).all()


class TestPosterior:
    def test_sums_to_one(self, rng):
        q = T.Tensor(rng.standard_normal((9, 5)))
        c = T.Tensor(rng.standard_normal((4, 5)))
        dummies = T.Tensor(rng.standard_normal((3, 5)))
        rows, _ = M.select_dummy(q, dummies, 1.0, "eval")
        p = M.posterior(q, c, rows, M.ScoringConfig(1.0, 3.0))
        assert p.data.shape == (9, 5)
        assert np.abs(p.data.sum(axis=1) - 1.0).max() <= 1e-12

    def test_symmetric_when_gamma_one(self):
        q = T.Tensor(np.array([[0.0, 0.0]]))
        c = T.Tensor(np.array([[1.0, 0.0]]))
        dummy = T.Tensor(np.array([[-1.0, 0.0]]))
        p = M.posterior(q, c, dummy, M.ScoringConfig(1.0, 1.0))
        assert np.abs(p.data - 0.5).max() < 1e-12

    def test_gamma_three_hand_value(self):
        # equal unit distances, tau=1, gamma=3:
        # p_dummy = e^(-1/3) / (e^(-1) + e^(-1/3))
        q = T.Tensor(np.array([[0.0, 1.0]]))
        c = T.Tensor(np.array([[1.0, 1.0]]))
        dummy = T.Tensor(np.array([[-1.0, 1.0]]))
        p = M.posterior(q, c, dummy, M.ScoringConfig(1.0, 3.0))
        want = np.exp(-1 / 3) / (np.exp(-1.0) + np.exp(-1 / 3))
        assert abs(p.data[0, 1] - want) < 1e-12
        assert abs(want - 0.6607) < 1e-4

    def test_baseline_hand_value(self):
        # two classes at squared distances 0 and 2, tau=1: p1 = 1/(1+e^-2)
        q = T.Tensor(np.array([[0.0, 0.0]]))
        c = T.Tensor(np.array([[0.0, 0.0], [np.sqrt(2.0), 0.0]]))
        p = M.posterior(q, c, None, M.ScoringConfig(1.0, 3.0))
        want = 1.0 / (1.0 + np.exp(-2.0))
        assert abs(p.data[0, 0] - want) < 1e-12
        assert abs(want - 0.881) < 1e-3

    def test_baseline_matches_direct_implementation_on_random_episodes(self, rng):
        cfg = M.ScoringConfig(1.0, 3.0)
        worst = 0.0
        for _ in range(1000):
            n, d, nq = rng.integers(2, 7), rng.integers(2, 9), rng.integers(1, 8)
            q = rng.standard_normal((nq, d))
            c = rng.standard_normal((n, d))
            p = M.posterior(T.Tensor(q), T.Tensor(c), None, cfg).data
            dists = ((q[:, None, :] - c[None, :, :]) ** 2).sum(-1)
            want = softmax_rows(-dists)
            worst = max(worst, np.abs(p - want).max())
        assert worst <= 1e-10

    def test_tie_symmetry_dummy_equals_prototype(self, rng):
        c = rng.standard_normal((1, 4))
        q = T.Tensor(rng.standard_normal((3, 4)))
        p = M.posterior(q, T.Tensor(c), T.Tensor(np.repeat(c, 3, axis=0)),
                        M.ScoringConfig(1.0, 1.0))
        assert np.abs(p.data[:, 0] - p.data[:, 1]).max() < 1e-15

    def test_monotone_in_distance(self):
        cfg = M.ScoringConfig(1.0, 3.0)
        base = np.array([[2.0, 0.0]])
        closer = np.array([[1.0, 0.0]])
        c2 = np.array([[0.0, 3.0]])
        q = T.Tensor(np.zeros((1, 2)))
        dummy = T.Tensor(np.array([[5.0, 5.0]]))
        p_far = M.posterior(q, T.Tensor(np.vstack([base, c2])), dummy, cfg).data[0, 0]
        p_near = M.posterior(q, T.Tensor(np.vstack([closer, c2])), dummy, cfg).data[0, 0]
        assert p_near > p_far


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        m = make_model(channels=8, count=2)
        for p in m.params():
            p.data += 0.01 * rng.standard_normal(p.data.shape)
        m.encoder.blocks[0].bn_state.mean[:] = rng.standard_normal(8)
        save_checkpoint(tmp_path / "m.ckpt", m, {"best_epoch": 3})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta["best_epoch"] == "3"
        for (n1, p1), (n2, p2) in zip(m.named_params(), loaded.named_params()):
            assert n1 == n2
            assert (p1.data == p2.data).all()
        assert (loaded.encoder.blocks[0].bn_state.mean == m.encoder.blocks[0].bn_state.mean).all()

    def test_baseline_roundtrip(self, tmp_path):
        m = make_model(channels=8, baseline=True)
        save_checkpoint(tmp_path / "b.ckpt", m)
        loaded, _ = load_checkpoint(tmp_path / "b.ckpt")
        assert loaded.generator is None

    def test_corrupt_file_rejected(self, tmp_path):
        (tmp_path / "x.ckpt").write_text("not a checkpoint\n")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_identical_saves_are_byte_identical(self, tmp_path):
        m = make_model(channels=8)
        save_checkpoint(tmp_path / "a.ckpt", m)
        save_checkpoint(tmp_path / "b.ckpt", m)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
