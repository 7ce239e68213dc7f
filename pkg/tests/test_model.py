import math

import numpy as np
import pytest

from signa import tensor as T
from signa.attention import SignaConfig
from signa.gradcheck import END_TO_END_TOL, param_rel_error, tiny_model
from signa.model import (
    BackboneConfig, TrainConfig, TrainingError, bce_loss, build_model, load_checkpoint, predict,
    read_checkpoint, read_history, save_checkpoint, train, write_history,
)
from signa.semantics import LabelGraph, synthetic_embeddings
from signa.tensor import Tensor

LABELS = ["a", "b", "c"]
TINY = BackboneConfig(stage_channels=(4, 8, 8, 8), input_shape=(3, 8, 8), num_classes=3)


@pytest.fixture
def graph():
    return LabelGraph.from_label_matrix(LABELS, np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]]))


@pytest.fixture
def emb():
    return synthetic_embeddings(LABELS, 5, seed=1)


def tiny_signa(**kw):
    base = dict(heads=2, insertion_layer=2, gnn="sage", D=8, C=3)
    base.update(kw)
    return SignaConfig(**base)


class TestBuild:
    def test_baseline_smaller(self, graph, emb):
        base = build_model(TINY, None)
        sig = build_model(TINY, tiny_signa(), graph, emb)
        assert set(base.params) < set(sig.params)
        assert base.num_parameters() < sig.num_parameters()

    def test_width_contract(self, graph, emb):
        bb = BackboneConfig(num_classes=3)
        build_model(bb, SignaConfig(D=32, C=3), graph, synthetic_embeddings(LABELS, 5))
        with pytest.raises(ValueError, match="does not match"):
            build_model(bb, SignaConfig(D=64, C=3), graph, emb)

    @pytest.mark.parametrize("layer,D", [(1, 4), (2, 8), (3, 8), (4, 8)])
    def test_output_length(self, graph, emb, rng, layer, D):
        m = build_model(TINY, tiny_signa(insertion_layer=layer, D=D), graph, emb)
        assert m.forward(rng.standard_normal((2, 3, 8, 8))).shape == (2, 3)

    def test_needs_graph(self):
        with pytest.raises(ValueError):
            build_model(TINY, tiny_signa())


class TestForward:
    def test_batch_independence(self, graph, emb, rng):
        m = build_model(TINY, tiny_signa(), graph, emb, seed=3)
        x = rng.standard_normal((4, 3, 8, 8))
        full = m.forward(x).data
        for i in range(4):
            np.testing.assert_allclose(m.forward(x[i : i + 1]).data[0], full[i], rtol=0, atol=1e-13)

    def test_zero_parameters(self, graph, emb, rng):
        m = build_model(TINY, tiny_signa(), graph, emb)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        m.params["classifier.bias"].data = np.array([0.5, -1.0, 2.0])
        out = m.forward(rng.standard_normal((3, 3, 8, 8))).data
        np.testing.assert_array_equal(out, np.tile([0.5, -1.0, 2.0], (3, 1)))

    def test_deterministic(self, graph, emb, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        a = build_model(TINY, tiny_signa(), graph, emb, seed=9).forward(x).data
        b = build_model(TINY, tiny_signa(), graph, emb, seed=9).forward(x).data
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            build_model(TINY).forward(np.zeros((1, 3, 9, 8)))


class TestLoss:
    def test_zero_logits(self, rng):
        y = (rng.random((4, 5)) < 0.5).astype(int)
        assert bce_loss(Tensor(np.zeros((4, 5))), y).item() == pytest.approx(5 * math.log(2), rel=1e-14)

    def test_saturated(self):
        y = np.array([[1, 0, 1]])
        loss = bce_loss(Tensor(np.where(y == 1, 1e3, -1e3)), y, eps=1e-7).item()
        assert loss == pytest.approx(3 * -math.log(1 - 1e-7), rel=1e-9)
        assert loss < 1e-6

    def test_hand_case(self):
        z = np.array([[0.5, -1.0], [2.0, 0.0]])
        y = np.array([[1, 0], [0, 1]])
        s = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
        expected = -(math.log(s(0.5)) + math.log(1 - s(-1.0)) + math.log(1 - s(2.0)) + math.log(s(0.0))) / 2
        assert bce_loss(Tensor(z), y).item() == pytest.approx(expected, rel=1e-14)

    def test_non_binary(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.zeros((1, 2))), np.array([[0, 2]]))

    def test_nonnegative_finite(self, rng):
        for scale in (1, 10, 100, 1e4):
            z = scale * rng.standard_normal((5, 4))
            y = (rng.random((5, 4)) < 0.5).astype(int)
            v = bce_loss(Tensor(z), y).item()
            assert v >= 0 and math.isfinite(v)


class TestSchedule:
    def test_decay_points(self):
        tc = TrainConfig()
        assert tc.lr_at(0) == 0.001
        assert tc.lr_at(24) == 0.001
        assert tc.lr_at(25) == 0.0001
        assert tc.lr_at(50) == 0.00001
        assert tc.lr_at(75) == 0.000001

    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.batch_size, tc.epochs, tc.beta1, tc.beta2, tc.adam_eps) == (16, 80, 0.9, 0.999, 1e-8)


def _toy_data(rng, n=4):
    x = rng.standard_normal((n, 3, 8, 8))
    y = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 1]][:n])
    return x, y


class TestTrain:
    def test_overfit_four_samples(self, rng):
        labels = [str(i) for i in range(8)]
        y = (rng.random((4, 8)) < 0.4).astype(int)
        g = LabelGraph.from_label_matrix(labels, (rng.random((50, 8)) < 0.4).astype(int))
        x = rng.standard_normal((4, 3, 32, 32))
        m = build_model(BackboneConfig(), SignaConfig(D=32), g, synthetic_embeddings(labels, 300, 0), seed=0)
        tc = TrainConfig(epochs=200, decay_every=1000, hflip=0.0, vflip=0.0)
        res = train(m, x, y, x, y, tc, max_steps=200)
        assert len(res.history) == 200
        assert res.history[-1].train_loss < 0.05

    def test_deterministic_history(self, graph, emb, rng):
        x, y = _toy_data(rng)
        runs = []
        for _ in range(2):
            m = build_model(TINY, tiny_signa(), graph, emb, seed=4)
            res = train(m, x, y, x[:2], y[:2], TrainConfig(epochs=3, batch_size=2, seed=11))
            runs.append(([(r.lr, r.train_loss, r.val_f1_example) for r in res.history], m.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()

    def test_empty_split(self, graph, emb, rng):
        x, y = _toy_data(rng)
        with pytest.raises(TrainingError):
            train(build_model(TINY), x[:0], y[:0], x, y, TrainConfig(epochs=1))

    def test_history_round_trip(self, tmp_path, graph, emb, rng):
        x, y = _toy_data(rng)
        res = train(build_model(TINY), x, y, x, y, TrainConfig(epochs=2))
        write_history(tmp_path / "h.csv", res.history)
        assert read_history(tmp_path / "h.csv") == res.history

    def test_lr_recorded_per_epoch(self, rng):
        x, y = _toy_data(rng)
        res = train(build_model(TINY), x, y, x, y, TrainConfig(epochs=3, decay_every=1))
        assert [r.lr for r in res.history] == [0.001, 0.0001, 0.00001]


class TestPredict:
    def test_boundary_counts_positive(self):
        m = build_model(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(predict(m, np.zeros((2, 3, 8, 8))), np.ones((2, 3)))

    def test_large_logits(self):
        m = build_model(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        m.params["classifier.bias"].data = np.array([10.0, -10.0, 10.0])
        np.testing.assert_array_equal(predict(m, np.zeros((1, 3, 8, 8))), [[1, 0, 1]])

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            predict(build_model(TINY), np.zeros((1, 3, 8, 8)), threshold=1.0)

    def test_checkpoint_round_trip(self, tmp_path, graph, emb, rng):
        m = build_model(TINY, tiny_signa(gnn="gat"), graph, emb, seed=5)
        x = rng.standard_normal((3, 3, 8, 8))
        save_checkpoint(tmp_path / "m.ckpt", m, epoch=7, rng_state={"x": 1})
        m2, header = load_checkpoint(tmp_path / "m.ckpt")
        assert header["epoch"] == 7 and header["rng_state"] == {"x": 1}
        assert m.forward(x).data.tobytes() == m2.forward(x).data.tobytes()
        np.testing.assert_array_equal(predict(m, x), predict(m2, x))

    def test_checkpoint_layout(self, tmp_path):
        m = build_model(TINY)
        save_checkpoint(tmp_path / "b.ckpt", m)
        raw = (tmp_path / "b.ckpt").read_bytes()
        assert raw[:6] == b"SIGNA1"
        header, tensors = read_checkpoint(tmp_path / "b.ckpt")
        assert header["config"]["signa"] is None
        assert [e["name"] for e in header["tensors"]] == list(m.params)
        np.testing.assert_array_equal(tensors["stage1.weight"], m.params["stage1.weight"].data)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")


def test_block_identity_control(graph, emb, rng):
    sig = build_model(TINY, tiny_signa(gate_mode="linear", residual=True), graph, emb, seed=2)
    base = build_model(TINY, None, seed=8)
    for k in base.params:
        base.params[k].data = sig.params[k].data.copy()
    sig.params["signa.fuse.F"].data[:] = 0.0
    sig.params["signa.fuse.g"].data[:] = 0.0
    x = rng.standard_normal((4, 3, 8, 8))
    assert sig.forward(x).data.tobytes() == base.forward(x).data.tobytes()


def test_end_to_end_gradient_tiny():
    r = np.random.default_rng(0)
    x = r.standard_normal((2, 3, 8, 8))
    y = np.array([[1, 0, 1], [0, 1, 1]])
    m = tiny_model("sage")
    params = {k: v for k, v in m.params.items() if k.startswith(("signa.", "classifier."))}
    assert param_rel_error(lambda: bce_loss(m.forward(x), y), params) <= END_TO_END_TOL
