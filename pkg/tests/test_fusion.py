import itertools

import numpy as np
import pytest

from egofusion.fusion import (
    DEFAULT_GRID,
    FcFusionHead,
    FrozenStreamError,
    FusionError,
    StreamScores,
    concat_penultimate,
    grid_search_weights,
    read_scores,
    train_fc_fusion,
    weighted_sum_fuse,
    write_scores,
)
from egofusion.nets import DilatedNet, DilatedNetConfig, SpectrogramInputs, TrainHyper, predict
from egofusion.tensor import Tensor, parameters_checksum


def exhaustive_oracle(probs, labels, grid):
    """Evaluate every grid point with plain loops; first stream pinned at 1."""
    best, best_acc = None, -1
    for combo in itertools.product(sorted(grid), repeat=len(probs) - 1):
        w = (1.0,) + combo
        correct = 0
        for i, y in enumerate(labels):
            fused = [sum(w[s] * probs[s][i][c] for s in range(len(probs))) for c in range(len(probs[0][i]))]
            correct += int(max(range(len(fused)), key=lambda c: (fused[c], -c)) == y)
        if correct > best_acc:
            best, best_acc = w, correct
    return best


class TestWeightedSum:
    def test_two_stream_example(self):
        out = weighted_sum_fuse([np.array([0.1, 0.9]), np.array([0.8, 0.2])], (1, 1))
        np.testing.assert_allclose(out, [0.45, 0.55])
        assert out.argmax() == 1

    def test_single_stream_identity(self):
        p = np.array([[0.2, 0.5, 0.3]])
        np.testing.assert_allclose(weighted_sum_fuse([p], [1.7]), p)

    def test_mismatched_classes(self):
        with pytest.raises(FusionError):
            weighted_sum_fuse([np.ones(3) / 3, np.ones(4) / 4])

    def test_nonpositive_weight(self):
        with pytest.raises(FusionError):
            weighted_sum_fuse([np.ones(3) / 3, np.ones(3) / 3], (1.0, 0.0))

    def test_argmax_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m, c = int(rng.integers(1, 4)), int(rng.integers(2, 9))
            probs = list(rng.dirichlet(np.ones(c), size=m))
            w = rng.uniform(0.1, 3.0, m)
            scale = rng.uniform(0.01, 100.0)
            a = weighted_sum_fuse(probs, w)
            b = weighted_sum_fuse(probs, scale * w)
            assert a.argmax() == b.argmax()
            assert abs(a.sum() - 1) < 1e-9 and np.all(a >= 0)


class TestGridSearch:
    def test_default_grid(self):
        assert DEFAULT_GRID == (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0)

    def test_good_stream_driven_to_grid_max(self):
        # the adversarial stream is pinned; sample i is fixed only once w > t_i
        thresholds = np.linspace(1.05, 1.95, 10)
        q = (0.8 / thresholds + 1) / 2
        labels = np.zeros(10, dtype=int)
        bad = np.tile([0.1, 0.9], (10, 1))
        good = np.stack([q, 1 - q], axis=1)
        assert grid_search_weights([bad, good], labels) == (1.0, 2.0)

    def test_identical_streams_tie(self):
        p = np.random.default_rng(0).dirichlet(np.ones(5), size=30)
        labels = np.random.default_rng(1).integers(0, 5, 30)
        assert grid_search_weights([p, p.copy()], labels) == (1.0, 1.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, c, m = 25, 4, 2 + seed % 2
        probs = [rng.dirichlet(np.ones(c) * 0.5, size=n) for _ in range(m)]
        labels = rng.integers(0, c, n)
        assert grid_search_weights(probs, labels) == exhaustive_oracle(probs, labels, DEFAULT_GRID)

    @pytest.mark.parametrize("seed", range(5))
    def test_never_worse_than_unweighted(self, seed):
        rng = np.random.default_rng(seed)
        probs = [rng.dirichlet(np.ones(6), size=40) for _ in range(3)]
        labels = rng.integers(0, 6, 40)
        w = grid_search_weights(probs, labels)
        acc = lambda ws: np.mean(weighted_sum_fuse(probs, ws).argmax(axis=1) == labels)
        assert acc(w) >= acc((1.0, 1.0, 1.0))

    def test_empty_validation(self):
        with pytest.raises(FusionError):
            grid_search_weights([np.zeros((0, 3)), np.zeros((0, 3))], [])


def scores(stream, p, n=2):
    return StreamScores(stream, np.full((n, 3), 1 / 3), np.random.default_rng(0).standard_normal((n, p)))


class TestConcat:
    def test_paper_lengths(self):
        feats = concat_penultimate([scores("rgb", 2048), scores("flow", 2048), scores("audio", 256)])
        assert feats.shape == (2, 4352)

    def test_desk_lengths(self):
        parts = [scores("rgb", 256), scores("flow", 256), scores("audio", 256)]
        feats = concat_penultimate(parts)
        assert feats.shape == (2, 768)
        for i, s in enumerate(parts):
            np.testing.assert_array_equal(feats[:, 256 * i:256 * (i + 1)], s.penultimate)

    def test_subset_in_order(self):
        assert concat_penultimate([scores("rgb", 4), scores("audio", 3)]).shape == (2, 7)

    def test_wrong_order(self):
        with pytest.raises(FusionError):
            concat_penultimate([scores("audio", 4), scores("rgb", 4)])

    def test_duplicate_stream(self):
        with pytest.raises(FusionError):
            concat_penultimate([scores("rgb", 4), scores("rgb", 4)])

    def test_unknown_stream(self):
        with pytest.raises(ValueError):
            StreamScores("depth", np.ones((1, 2)) / 2, np.zeros((1, 3)))


class TestFcHead:
    def test_hidden_width(self):
        head = FcFusionHead(768, 10)
        assert head.hidden.weight.shape == (512, 768)
        assert head.out.weight.shape == (10, 512)
        with pytest.raises(ValueError):
            head.forward(Tensor(np.zeros((1, 700), dtype=np.float32)))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        sizes = {"rgb": 5, "flow": 4, "audio": 3}
        feats = {k: rng.standard_normal((6, p)).astype(np.float32) for k, p in sizes.items()}
        head = FcFusionHead(12, 4, hidden_dim=16, seed=1)
        x = np.concatenate([feats["rgb"], feats["flow"], feats["audio"]], axis=1)
        order = ["audio", "rgb", "flow"]
        offsets = {"rgb": 0, "flow": 5, "audio": 9}
        perm = np.concatenate([np.arange(offsets[k], offsets[k] + sizes[k]) for k in order])
        x_perm = np.concatenate([feats[k] for k in order], axis=1)
        assert not np.array_equal(x, x_perm)
        permuted = FcFusionHead(12, 4, hidden_dim=16, seed=1)
        permuted.hidden.weight.values[...] = head.hidden.weight.values[:, perm]
        a, _ = head.forward(Tensor(x))
        b, _ = permuted.forward(Tensor(x_perm))
        np.testing.assert_allclose(a.values, b.values, rtol=1e-5, atol=1e-6)


def tiny_stream(seed):
    return DilatedNet(DilatedNetConfig.scaled(3, (2, 2, 2, 2), (16, 12), (8, 8)), seed)


class TestFrozenTraining:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.standard_normal((30, 16, 12)).astype(np.float32)
        self.labels = rng.integers(0, 3, 30)
        self.streams = [tiny_stream(1), tiny_stream(2)]

    def features(self):
        inputs = SpectrogramInputs(self.x)
        parts = [StreamScores(sid, *predict(m, inputs, range(30)))
                 for sid, m in zip(("rgb", "audio"), self.streams)]
        return concat_penultimate(parts)

    def test_checksums_unchanged(self):
        for s in self.streams:
            s.freeze()
        before = [parameters_checksum(s.parameters()) for s in self.streams]
        head = FcFusionHead(16, 3, seed=0)
        head_before = parameters_checksum(head.parameters())
        result = train_fc_fusion(head, self.features(), self.labels, range(20), range(20, 30),
                                 TrainHyper(learning_rate=1e-2, epochs=5, patience=10), self.streams)
        assert len(result.history) == 5
        assert [parameters_checksum(s.parameters()) for s in self.streams] == before
        assert parameters_checksum(head.parameters()) != head_before

    def test_unfrozen_stream_aborts(self):
        self.streams[0].freeze()
        with pytest.raises(FrozenStreamError):
            train_fc_fusion(FcFusionHead(16, 3), self.features(), self.labels, range(20), range(20, 30),
                            TrainHyper(epochs=1), self.streams)


def test_split_information_fusion_beats_single_streams():
    # label = 2a + b with bit a visible only to one stream and bit b only to the other
    rng = np.random.default_rng(0)
    n = 400
    labels = rng.integers(0, 4, n)
    a, b = labels // 2, labels % 2
    centers = rng.standard_normal((2, 8)) * 2
    fa = (centers[a] + rng.normal(0, 0.5, (n, 8))).astype(np.float32)
    fb = (centers[b] + rng.normal(0, 0.5, (n, 8))).astype(np.float32)
    train, val = range(300), range(300, 400)
    hyper = TrainHyper(learning_rate=1e-2, batch_size=16, epochs=30, patience=30)
    singles = []
    for f in (fa, fb):
        singles.append(train_fc_fusion(FcFusionHead(8, 4, 32), f, labels, train, val, hyper).best_val_top1)
    fused = train_fc_fusion(FcFusionHead(16, 4, 32), np.concatenate([fa, fb], axis=1), labels, train, val, hyper)
    assert max(singles) <= 0.6
    assert fused.best_val_top1 > max(singles) + 0.3


def test_score_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=5)
    pen = rng.standard_normal((5, 6))
    ids = [f"S{i:03d}" for i in range(5)]
    path = tmp_path / "s.csv"
    write_scores(path, ids, probs, pen)
    back_ids, back_p, back_f = read_scores(path)
    assert back_ids == ids
    np.testing.assert_allclose(back_p, probs, rtol=1e-8)
    np.testing.assert_allclose(back_f, pen, rtol=1e-8)
