import math

import numpy as np
import pytest
import torch

from fdcheck import check, numeric_grad
from polychain import engine
from polychain.errors import CacheFormatError, SegmentOutOfRange


def t64(a):
    return torch.tensor(a, dtype=torch.float64, requires_grad=True)


class TestSegmentReduce:
    def test_mean_example(self):
        got = engine.segment_reduce(torch.tensor([[1.0], [2.0], [3.0]]), torch.tensor([0, 0, 1]), 2, engine.MEAN)
        assert got.tolist() == [[1.5], [3.0]]

    def test_single_segment_sum(self, rng):
        src = torch.from_numpy(rng.normal(size=(7, 3)))
        got = engine.segment_reduce(src, torch.zeros(7, dtype=torch.long), 1)
        assert torch.allclose(got[0], src.sum(0))

    @pytest.mark.parametrize("reduction", [engine.SUM, engine.MEAN, engine.MAX])
    def test_against_loops(self, rng, reduction):
        src = rng.normal(size=(40, 4))
        seg = rng.integers(0, 9, size=40)
        seg[seg == 4] = 5  # leave segment 4 empty
        got = engine.segment_reduce(torch.from_numpy(src), torch.from_numpy(seg), 9, reduction).numpy()
        op = {engine.SUM: np.sum, engine.MEAN: np.mean, engine.MAX: np.max}[reduction]
        for s in range(9):
            rows = src[seg == s]
            expected = op(rows, axis=0) if len(rows) else np.zeros(4)
            assert np.allclose(got[s], expected, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(SegmentOutOfRange):
            engine.segment_reduce(torch.ones(2, 1), torch.tensor([0, 3]), 3)
        with pytest.raises(SegmentOutOfRange):
            engine.segment_reduce(torch.ones(2, 1), torch.tensor([-1, 0]), 3)
        with pytest.raises(ValueError):
            engine.segment_reduce(torch.ones(2, 1), torch.tensor([0, 0]), 1, "median")

    def test_conservation(self, rng):
        src = torch.from_numpy(rng.normal(size=(30, 2)))
        seg = torch.from_numpy(rng.integers(0, 5, size=30))
        totals = engine.segment_reduce(src, seg, 5)
        assert torch.allclose(totals.sum(0), src.sum(0))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("reduction", [engine.SUM, engine.MEAN, engine.MAX])
    def test_gradient(self, seed, reduction):
        g = np.random.default_rng(seed)
        src = t64(g.normal(size=(12, 3)))
        seg = torch.from_numpy(g.integers(0, 4, size=12))
        w = torch.from_numpy(g.normal(size=(4, 3)))
        err = check(lambda: (engine.segment_reduce(src, seg, 4, reduction) * w).sum(), [src])
        assert err < 1e-6

    def test_mean_gradient_is_inverse_count(self):
        src = t64([[1.0], [2.0], [5.0]])
        engine.segment_reduce(src, torch.tensor([0, 0, 1]), 2, engine.MEAN).sum().backward()
        assert src.grad.flatten().tolist() == [0.5, 0.5, 1.0]


class TestSoftmax:
    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one_and_gradient(self, seed):
        g = np.random.default_rng(seed)
        s = t64(g.normal(size=20) * 3)
        seg = torch.from_numpy(g.integers(0, 6, size=20))
        alpha = engine.segment_softmax(s, seg, 6)
        sums = engine.segment_reduce(alpha.detach().unsqueeze(1), seg, 6).squeeze(1)
        present = torch.bincount(seg, minlength=6) > 0
        assert torch.allclose(sums[present], torch.ones(int(present.sum()), dtype=torch.float64), atol=1e-12)
        w = torch.from_numpy(g.normal(size=20))
        assert check(lambda: (engine.segment_softmax(s, seg, 6) * w).sum(), [s]) < 1e-5

    def test_large_scores_are_stable(self):
        alpha = engine.segment_softmax(torch.tensor([1000.0, 1000.0, -1000.0]), torch.tensor([0, 0, 1]), 2)
        assert alpha.tolist() == [0.5, 0.5, 1.0]


class TestBackwardAndLosses:
    def test_sum_and_dot(self):
        x, y = t64([1.0, -2.0, 3.0]), torch.tensor([0.5, 4.0, -1.0], dtype=torch.float64)
        engine.backward(x.sum())
        assert x.grad.tolist() == [1.0, 1.0, 1.0]
        x.grad = None
        engine.backward((x * y).sum())
        assert x.grad.tolist() == y.tolist()
        with pytest.raises(ValueError):
            engine.backward(x * 2)

    def test_huber_against_formula(self, rng):
        pred, tgt = rng.normal(size=50) * 2, rng.normal(size=50)
        r = np.abs(pred - tgt)
        expected = np.mean(np.where(r <= 1.0, 0.5 * r**2, r - 0.5))
        assert engine.huber_loss(torch.from_numpy(pred), torch.from_numpy(tgt)).item() == pytest.approx(expected)
        big = engine.huber_loss(torch.from_numpy(pred), torch.from_numpy(tgt), delta=1e6).item()
        assert big == pytest.approx(0.5 * np.mean((pred - tgt) ** 2), rel=1e-12)

    def test_cross_entropy_against_formula(self, rng):
        logits = rng.normal(size=(6, 5))
        target = rng.integers(0, 5, size=6)
        logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        expected = -logp[np.arange(6), target].mean()
        got = engine.cross_entropy(torch.from_numpy(logits), torch.from_numpy(target)).item()
        assert got == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_activation_gradients(self, seed):
        g = np.random.default_rng(seed)
        x = t64(g.normal(size=15))
        w = torch.from_numpy(g.normal(size=15))
        assert check(lambda: (engine.gelu(x) * w).sum(), [x]) < 1e-5
        assert check(lambda: (engine.leaky_relu(x) * w).sum(), [x]) < 1e-5

    def test_inverted_dropout(self):
        torch.manual_seed(0)
        x = torch.ones(20000, dtype=torch.float64)
        y = engine.dropout(x, 0.25, training=True)
        kept = y[y != 0]
        assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))
        assert abs(y.mean().item() - 1.0) < 0.03
        assert torch.equal(engine.dropout(x, 0.25, training=False), x)


class TestOptim:
    def test_zero_grad_no_decay_is_identity(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = engine.adamw([p], lr=0.1, weight_decay=0.0)
        p.grad = torch.zeros(2)
        opt.step()
        assert p.tolist() == [1.0, -2.0]

    def test_decoupled_decay(self):
        p = torch.nn.Parameter(torch.tensor([2.0]))
        opt = engine.adamw([p], lr=0.1, weight_decay=0.5)
        p.grad = torch.zeros(1)
        opt.step()
        assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_first_step_matches_adam_formula(self):
        p = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=torch.float64))
        opt = engine.adamw([p], lr=0.01, weight_decay=0.0)
        p.grad = torch.tensor([0.3, -4.0], dtype=torch.float64)
        opt.step()
        # bias-corrected first step is lr * sign(g) up to eps
        assert p.tolist() == pytest.approx([0.99, 1.01], abs=1e-9)

    def test_deterministic(self):
        def run():
            torch.manual_seed(3)
            lin = torch.nn.Linear(4, 1)
            opt = engine.adamw(lin.parameters(), 1e-2, 1e-4)
            x = torch.randn(16, 4)
            for _ in range(5):
                opt.zero_grad()
                lin(x).pow(2).mean().backward()
                opt.step()
            return lin.weight.detach().clone()

        assert torch.equal(run(), run())

    def test_cosine(self):
        assert engine.cosine_anneal(0, 10) == 1.0
        assert engine.cosine_anneal(10, 10) == pytest.approx(0.0, abs=1e-15)
        assert engine.cosine_anneal(5, 10) == pytest.approx(0.5)
        assert engine.cosine_anneal(10, 10, floor=0.1) == pytest.approx(0.1)
        assert engine.cosine_anneal(25, 10) == pytest.approx(0.0, abs=1e-15)

    def test_plateau(self):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = engine.adamw([p], 5e-5, 0.0)
        sched = engine.PlateauScheduler(opt, factor=0.3, patience=30, min_lr=1e-6)
        sched.step(1.0)
        for _ in range(30):
            sched.step(1.0)
        assert sched.lr == 5e-5
        sched.step(1.0)
        assert sched.lr == pytest.approx(1.5e-5, rel=1e-12)

    def test_plateau_floor(self):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = engine.adamw([p], 2e-6, 0.0)
        sched = engine.PlateauScheduler(opt, factor=0.3, patience=0, min_lr=1e-6)
        for _ in range(5):
            sched.step(1.0)
        assert sched.lr == 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = {"a": torch.randn(3, 4), "b": torch.tensor(2.5), "c": torch.zeros(0, 2)}
        engine.save_state(tmp_path / "m.ckpt", state, {"arch": "gine", "hash": engine.config_hash({"x": 1})})
        loaded, manifest = engine.load_state(tmp_path / "m.ckpt")
        assert manifest["arch"] == "gine" and [p[0] for p in manifest["parameters"]] == ["a", "b", "c"]
        for k in state:
            assert loaded[k].shape == state[k].shape and torch.equal(loaded[k], state[k])

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CacheFormatError):
            engine.load_state(tmp_path / "x")
        engine.save_state(tmp_path / "y", {"a": torch.ones(2)}, {})
        data = bytearray((tmp_path / "y").read_bytes())
        data[4] = 9
        (tmp_path / "z").write_bytes(bytes(data))
        with pytest.raises(CacheFormatError):
            engine.load_state(tmp_path / "z")
        (tmp_path / "w").write_bytes((tmp_path / "y").read_bytes() + b"\0")
        with pytest.raises(CacheFormatError):
            engine.load_state(tmp_path / "w")

    def test_config_hash_is_order_free(self):
        assert engine.config_hash({"a": 1, "b": 2}) == engine.config_hash({"b": 2, "a": 1})
        assert engine.config_hash({"a": 1}) != engine.config_hash({"a": 2})


def test_numeric_grad_oracle_itself():
    x = torch.tensor([0.3, -1.2], dtype=torch.float64)
    g = numeric_grad(lambda: (x ** 3).sum(), x)
    assert np.allclose(g, 3 * x.numpy() ** 2, rtol=1e-9)
    assert math.isclose(float(g[0]), 0.27, rel_tol=1e-9)
