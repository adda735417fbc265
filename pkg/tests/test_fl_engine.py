import numpy as np
import pytest
from scipy.optimize import approx_fprime

from fedmarket.feature_io import read_csv, read_features, read_fmkt, write_csv, write_fmkt
from fedmarket.fl_engine import (
    Arch,
    DivergenceError,
    FedConfig,
    ModelParams,
    PartitionSpec,
    aggregate,
    centralized_train,
    evaluate,
    fed_train,
    generate_synthetic,
    init_model,
    local_train,
    loss_and_grad,
    partition,
)
from fedmarket.measure_ot import DiscreteMeasure


@pytest.fixture(scope="module")
def blobs():
    return generate_synthetic(6, 4, 600, class_sep=4.0, seed=3)


class TestSynthetic:
    def test_balance(self):
        data = generate_synthetic(2, 3, 10, seed=0)
        np.testing.assert_array_equal(np.bincount(data.labels), [5, 5])

    def test_deterministic(self):
        a = generate_synthetic(3, 2, 30, seed=5)
        b = generate_synthetic(3, 2, 30, seed=5)
        assert a.points.tobytes() == b.points.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_separable(self):
        data = generate_synthetic(2, 2, 400, class_sep=10.0, seed=1)
        cfg = FedConfig(rounds=20, lr=0.5, batch_size=400)
        _, traj = centralized_train(data, data, cfg)
        assert traj[-1].accuracy >= 0.99

    def test_class_separation(self):
        data = generate_synthetic(5, 3, 5000, class_sep=3.0, seed=2, noise=1e-3)
        means = np.array([data.points[data.labels == c].mean(0) for c in range(5)])
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(5, 1)]
        assert gaps.min() == pytest.approx(3.0, abs=1e-3)

    def test_errors(self):
        with pytest.raises(ValueError):
            generate_synthetic(3, 2, 2)
        with pytest.raises(ValueError):
            generate_synthetic(1, 2, 10)


def _pairs(m):
    return {(tuple(p), int(l)) for p, l in zip(m.points, m.labels)}


class TestPartition:
    def test_iid_conserves(self, blobs):
        parts = partition(blobs, PartitionSpec("iid", seed=1), 4)
        assert sum(p.n for p in parts) == blobs.n
        assert set().union(*map(_pairs, parts)) == _pairs(blobs)

    def test_stratified_balances_classes(self, blobs):
        parts = partition(blobs, PartitionSpec("iid", seed=1, stratified=True), 4)
        assert set().union(*map(_pairs, parts)) == _pairs(blobs)
        counts = np.array([np.bincount(p.labels, minlength=6) for p in parts])
        assert np.all(counts.max(axis=0) - counts.min(axis=0) <= 1)
        assert max(p.n for p in parts) - min(p.n for p in parts) <= 1
        mis = partition(blobs, PartitionSpec("mislabel", seed=1, fractions=[0, 0.5, 0, 0], stratified=True), 4)
        for a, b in zip(parts, mis):
            np.testing.assert_array_equal(a.points, b.points)

    def test_label_skew(self, blobs):
        spec = PartitionSpec("label_skew", seed=0, labels_per_source=[{0, 1}, {2, 3}, {4, 5}])
        parts = partition(blobs, spec, 3)
        for p, want in zip(parts, [{0, 1}, {2, 3}, {4, 5}]):
            assert set(np.unique(p.labels).tolist()) == want
        assert set().union(*map(_pairs, parts)) == _pairs(blobs)

    def test_label_skew_absent(self, blobs):
        with pytest.raises(ValueError, match="absent"):
            partition(blobs, PartitionSpec("label_skew", labels_per_source=[{0}, {9}]), 2)

    def test_mislabel_count(self):
        data = generate_synthetic(4, 2, 100, seed=0)
        parts = partition(data, PartitionSpec("mislabel", seed=2, fractions=[0.2]), 1)
        assert np.sum(parts[0].labels != data.labels) == 20

    def test_mislabel_per_source(self, blobs):
        parts = partition(blobs, PartitionSpec("mislabel", seed=4, fractions=[0.0, 0.2, 0.05]), 3)
        clean = partition(blobs, PartitionSpec("iid", seed=4), 3)
        for p, c, f in zip(parts, clean, [0.0, 0.2, 0.05]):
            np.testing.assert_array_equal(p.points, c.points)
            assert np.sum(p.labels != c.labels) == round(f * c.n)

    def test_imbalance(self, blobs):
        spec = PartitionSpec("imbalance", seed=0, major_classes={0, 1, 2, 3}, major_proportion=0.7, source_size=200)
        for p in partition(blobs, spec, 2):
            counts = np.bincount(p.labels, minlength=6)
            assert counts[:4].sum() == 140
            assert list(counts[4:]) == [30, 30]

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PartitionSpec("mislabel", fractions=[1.5])
        with pytest.raises(ValueError):
            PartitionSpec("imbalance", major_classes={0}, major_proportion=1.0)
        with pytest.raises(ValueError):
            PartitionSpec("dirichlet")


class TestModel:
    @pytest.mark.parametrize("hidden", [(), (5,), (4, 3)])
    def test_gradient_matches_finite_differences(self, hidden):
        rng = np.random.default_rng(0)
        arch = Arch(3, hidden, 4)
        w = init_model(arch, 1).weights + rng.normal(0, 0.1, arch.num_weights)
        X = rng.normal(size=(7, 3))
        y = rng.integers(0, 4, 7)
        _, g = loss_and_grad(arch, w, X, y)
        fd = approx_fprime(w, lambda v: loss_and_grad(arch, v, X, y)[0], 1e-7)
        np.testing.assert_allclose(g, fd, atol=1e-5)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            ModelParams(Arch(2, (), 2), np.zeros(5))
        with pytest.raises(ValueError):
            ModelParams(Arch(2, (), 2), np.full(6, np.nan))


class TestEvaluate:
    def test_oracle_model(self):
        val = DiscreteMeasure.uniform(np.eye(3), [0, 1, 2])
        w = np.concatenate([(1e3 * np.eye(3)).ravel(), np.zeros(3)])
        assert evaluate(ModelParams(Arch(3, (), 3), w), val).accuracy == 1.0

    def test_uniform_logits(self):
        val = generate_synthetic(5, 2, 50, seed=0)
        res = evaluate(ModelParams(Arch(2, (), 5), np.zeros(15)), val)
        assert abs(res.loss - np.log(5)) < 1e-9

    def test_constant_predictor(self):
        val = generate_synthetic(2, 2, 40, seed=0)
        w = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        assert evaluate(ModelParams(Arch(2, (), 2), w), val).accuracy == 0.5


class TestLocalTrain:
    def setup_method(self):
        self.data = generate_synthetic(3, 2, 90, class_sep=5.0, seed=1)
        self.model = init_model(Arch(2, (6,), 3), seed=2)

    def test_zero_lr(self):
        cfg = FedConfig(lr=0.0, local_epochs=2)
        out, aux = local_train(self.model, self.data, self.model, cfg)
        np.testing.assert_array_equal(out.weights, self.model.weights)
        assert aux["tau"] == 6

    def test_fedprox_zero_mu_is_fedavg(self):
        a, _ = local_train(self.model, self.data, self.model, FedConfig("fedavg", seed=4, local_epochs=3))
        b, _ = local_train(self.model, self.data, self.model, FedConfig("fedprox", seed=4, local_epochs=3, mu=0.0))
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_fedprox_pulls_toward_global(self):
        far = init_model(self.model.arch, seed=9)
        plain, _ = local_train(self.model, self.data, far, FedConfig("fedprox", mu=0.0, local_epochs=3))
        prox, _ = local_train(self.model, self.data, far, FedConfig("fedprox", mu=1.0, local_epochs=3))
        assert np.linalg.norm(prox.weights - far.weights) < np.linalg.norm(plain.weights - far.weights)

    def test_full_batch_decreases_loss(self):
        data = generate_synthetic(2, 2, 100, class_sep=8.0, seed=3)
        model = init_model(Arch(2, (), 2), seed=0)
        before = evaluate(model, data).loss
        out, _ = local_train(model, data, model, FedConfig(lr=0.1, batch_size=100))
        assert evaluate(out, data).loss < before

    def test_scaffold_aux(self):
        cfg = FedConfig("scaffold", lr=0.05)
        out, aux = local_train(self.model, self.data, self.model, cfg)
        expected = (self.model.weights - out.weights) / (aux["tau"] * cfg.lr)
        np.testing.assert_allclose(aux["control"], expected)
        np.testing.assert_allclose(aux["control_delta"], expected)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        with pytest.raises(DivergenceError) as err:
            local_train(self.model, self.data, self.model, FedConfig(lr=1e200), round_idx=7)
        assert err.value.round_idx == 7

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            local_train(init_model(Arch(3, (), 3)), self.data, self.model, FedConfig())


class TestAggregate:
    def setup_method(self):
        arch = Arch(3, (4,), 2)
        self.a = init_model(arch, 1)
        self.b = init_model(arch, 2)

    @pytest.mark.parametrize("alg", ["fedavg", "fedprox", "scaffold", "fednova"])
    def test_identical_models(self, alg):
        ups = [(self.a, {"tau": t, "control_delta": np.zeros_like(self.a.weights)}, n)
               for t, n in [(1, 3), (2, 7), (5, 11)]]
        out = aggregate(ups, alg, state={})
        assert out.weights.tobytes() == self.a.weights.tobytes()

    def test_weights_one_zero(self):
        out = aggregate([(self.a, {}, 10), (self.b, {}, 0)], "fedavg")
        assert out.weights.tobytes() == self.a.weights.tobytes()

    def test_weighted_mean(self):
        out = aggregate([(self.a, {}, 1), (self.b, {}, 3)], "fedavg")
        np.testing.assert_allclose(out.weights, 0.25 * self.a.weights + 0.75 * self.b.weights)

    def test_fednova_zero_delta(self):
        out = aggregate([(self.a, {"tau": 1}, 5), (self.a, {"tau": 2}, 5)], "fednova")
        np.testing.assert_array_equal(out.weights, self.a.weights)

    def test_fednova_normalization(self):
        g = self.a
        w1 = ModelParams(g.arch, g.weights + 1.0)
        w2 = ModelParams(g.arch, g.weights + 4.0)
        out = aggregate([(w1, {"tau": 1}, 1), (w2, {"tau": 4}, 1)], "fednova", global_model=g)
        # per-step deltas are both 1; effective steps (1+4)/2
        np.testing.assert_allclose(out.weights, g.weights + 2.5)

    def test_scaffold_server_control(self):
        state = {}
        d1 = np.ones_like(self.a.weights)
        aggregate([(self.a, {"control_delta": d1}, 1), (self.b, {"control_delta": 3 * d1}, 1)], "scaffold", state=state)
        np.testing.assert_allclose(state["control"], 2.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate([], "fedavg")
        other = init_model(Arch(2, (), 2))
        with pytest.raises(ValueError, match="mismatch"):
            aggregate([(self.a, {}, 1), (other, {}, 1)], "fedavg")


class TestFedTrain:
    def test_single_client_matches_centralized(self, blobs):
        cfg = FedConfig("fedavg", rounds=4, local_epochs=2, lr=0.05, batch_size=16, seed=3, hidden_dims=(8,))
        fm, ft = fed_train([blobs], blobs, cfg)
        cm, ct = centralized_train(blobs, blobs, cfg)
        assert fm.weights.tobytes() == cm.weights.tobytes()
        assert ft == ct

    def test_fedprox_zero_mu_bitwise(self, blobs):
        parts = partition(blobs, PartitionSpec("iid", seed=0), 3)
        a = fed_train(parts, blobs, FedConfig("fedavg", rounds=3, seed=1))
        b = fed_train(parts, blobs, FedConfig("fedprox", mu=0.0, rounds=3, seed=1))
        assert a[0].weights.tobytes() == b[0].weights.tobytes()
        assert a[1] == b[1]

    @pytest.mark.parametrize("alg", ["fedavg", "fedprox", "scaffold", "fednova"])
    def test_deterministic(self, blobs, alg):
        parts = partition(blobs, PartitionSpec("iid", seed=0), 3)
        cfg = FedConfig(alg, rounds=3, seed=2, mu=0.1, lr=0.05)
        a = fed_train(parts, blobs, cfg)
        b = fed_train(parts, blobs, cfg)
        assert a[0].weights.tobytes() == b[0].weights.tobytes()
        assert a[1] == b[1]

    def test_label_skew_fedprox_improves(self, blobs):
        spec = PartitionSpec("label_skew", seed=0, labels_per_source=[{0, 1}, {2, 3}, {4, 5}])
        parts = partition(blobs, spec, 3)
        _, traj = fed_train(parts, blobs, FedConfig("fedprox", mu=0.1, rounds=30, lr=0.05, seed=0))
        assert traj[-1].accuracy > traj[0].accuracy

    @pytest.mark.parametrize("alg", ["scaffold", "fednova"])
    def test_other_algorithms_learn(self, blobs, alg):
        parts = partition(blobs, PartitionSpec("iid", seed=0), 3)
        _, traj = fed_train(parts, blobs, FedConfig(alg, rounds=15, lr=0.05, seed=0))
        assert traj[-1].accuracy > 0.8

    def test_empty(self, blobs):
        with pytest.raises(ValueError):
            fed_train([], blobs, FedConfig())


class TestFeatureIO:
    def test_fmkt_round_trip(self, tmp_path):
        data = generate_synthetic(3, 4, 30, seed=0)
        write_fmkt(tmp_path / "x.fmkt", data)
        back = read_fmkt(tmp_path / "x.fmkt")
        np.testing.assert_array_equal(back.points, data.points.astype(np.float32))
        np.testing.assert_array_equal(back.labels, data.labels)
        raw = (tmp_path / "x.fmkt").read_bytes()
        assert raw[:4] == b"FMKT" and len(raw) == 16 + 30 * 4 * 4 + 30 * 4

    def test_unlabeled(self, tmp_path):
        data = DiscreteMeasure.uniform(np.arange(6.0).reshape(3, 2))
        write_fmkt(tmp_path / "u.bin", data)
        assert read_features(tmp_path / "u.bin").labels is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            read_fmkt(tmp_path / "bad")

    def test_truncated(self, tmp_path):
        data = generate_synthetic(2, 2, 10, seed=0)
        write_fmkt(tmp_path / "t", data)
        (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-3])
        with pytest.raises(ValueError):
            read_fmkt(tmp_path / "t")

    def test_csv_round_trip(self, tmp_path):
        data = generate_synthetic(3, 2, 12, seed=1)
        write_csv(tmp_path / "d.csv", data)
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "f0,f1,label"
        back = read_features(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.points, data.points)
        np.testing.assert_array_equal(back.labels, data.labels)
