import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selffusion import autodiff as ad
from selffusion.autodiff import Tape
from selffusion.errors import ConfigError, ContractError
from selffusion.metrics import (
    CSV_COLUMNS,
    LossKind,
    MetricsReport,
    batch_loss,
    chamfer_distance,
    chamfer_distance_batch,
    chamfer_value,
    evaluate_batch,
    f_score,
    register_loss,
)

from oracles import brute_chamfer, brute_fscore, central_difference

clouds = st.integers(0, 100_000).map(lambda s: np.random.default_rng(s))


class TestChamfer:
    def test_identity(self, rng):
        y = rng.normal(size=(10, 3))
        assert float(chamfer_distance(y, y).data) == 0.0

    def test_single_points(self):
        assert float(chamfer_distance([[0.0, 0, 0]], [[1.0, 0, 0]]).data) == 2.0

    def test_two_to_one(self):
        assert float(chamfer_distance([[0.0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0]]).data) == 2.0

    def test_empty_is_error(self):
        with pytest.raises(ContractError):
            chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(clouds)
    def test_matches_double_loop(self, rng):
        y, y_hat = rng.uniform(-1, 1, (rng.integers(1, 30), 3)), rng.uniform(-1, 1, (rng.integers(1, 30), 3))
        assert chamfer_value(y, y_hat) == pytest.approx(brute_chamfer(y, y_hat), rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(clouds)
    def test_symmetry_and_permutation(self, rng):
        y, y_hat = rng.normal(size=(17, 3)), rng.normal(size=(11, 3))
        cd = chamfer_value(y, y_hat)
        assert chamfer_value(y_hat, y) == cd
        assert chamfer_value(rng.permutation(y), rng.permutation(y_hat)) == pytest.approx(cd, rel=1e-9, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(clouds, st.floats(0.1, 10))
    def test_scale_law(self, rng, s):
        y, y_hat = rng.normal(size=(9, 3)), rng.normal(size=(13, 3))
        assert chamfer_value(s * y, s * y_hat) == pytest.approx(s * s * chamfer_value(y, y_hat), rel=1e-7)

    def test_gradient_wrt_prediction(self, rng):
        y, y_hat = rng.uniform(-1, 1, (8, 3)), rng.uniform(-1, 1, (6, 3))
        t = Tape("wide")
        h = t.input(y_hat)
        grads = t.gradients(chamfer_distance(y, h))
        numeric = central_difference(lambda x: chamfer_value(y, x), y_hat.copy())
        np.testing.assert_allclose(grads[h.node], numeric, rtol=1e-5, atol=1e-8)

    def test_batch_is_per_sample(self, rng):
        y, y_hat = rng.normal(size=(3, 7, 3)), rng.normal(size=(3, 5, 3))
        out = chamfer_distance_batch(y, y_hat).data
        np.testing.assert_allclose(out, [chamfer_value(a, b) for a, b in zip(y, y_hat)], rtol=1e-12)


class TestFScore:
    def test_identity(self, rng):
        y = rng.normal(size=(10, 3))
        assert f_score(y, y, 1e-9) == 1.0

    def test_far_apart(self, rng):
        assert f_score(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) + 100, 0.01) == 0.0

    def test_hand_table(self):
        tau = 1e-3
        y = [[0.0, 0, 0], [10.0, 0, 0]]
        y_hat = [[0.0005, 0, 0], [10 + 5 * tau, 0, 0]]
        assert f_score(y, y_hat, tau) == pytest.approx(0.5)

    def test_threshold_is_strict_on_euclidean_distance(self):
        assert f_score([[0.0, 0, 0]], [[0.5, 0, 0]], 0.5) == 0.0
        assert f_score([[0.0, 0, 0]], [[0.5, 0, 0]], 0.5000001) == 1.0

    def test_bad_tau(self):
        with pytest.raises(ContractError):
            f_score([[0.0, 0, 0]], [[0.0, 0, 0]], 0.0)

    @settings(max_examples=30, deadline=None)
    @given(clouds, st.sampled_from([0.05, 0.2, 0.5, 1.0]))
    def test_matches_oracle_and_permutation(self, rng, tau):
        y, y_hat = rng.uniform(-1, 1, (15, 3)), rng.uniform(-1, 1, (12, 3))
        f = f_score(y, y_hat, tau)
        assert 0.0 <= f <= 1.0
        assert f == pytest.approx(brute_fscore(y, y_hat, tau), abs=1e-12)
        assert f_score(rng.permutation(y), rng.permutation(y_hat), tau) == pytest.approx(f, abs=1e-9)


class TestLossKind:
    def test_vanilla_takes_no_parameters(self):
        with pytest.raises(ConfigError):
            LossKind("vanilla_cd", parameters={"alpha": 1.0})

    def test_parse_round_trip(self):
        kind = LossKind.parse("density_aware:alpha=40,n_lambda=0.5")
        assert kind.tag == "external" and kind.parameters == {"alpha": 40.0, "n_lambda": 0.5}
        assert LossKind.parse(str(kind)) == kind
        assert LossKind.parse("vanilla_cd") == LossKind()

    def test_external_slot(self, rng):
        register_loss("scaled_cd", lambda y, y_hat, factor: ad.scale(chamfer_distance_batch(y, y_hat), factor))
        y, y_hat = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 5, 3))
        base = float(batch_loss(LossKind(), y, y_hat).data)
        scaled = float(batch_loss(LossKind.parse("scaled_cd:factor=3"), y, y_hat).data)
        assert scaled == pytest.approx(3 * base)
        with pytest.raises(ConfigError):
            batch_loss(LossKind.parse("unregistered"), y, y_hat)


class TestReport:
    def test_single_identical_pair(self, rng):
        y = rng.normal(size=(6, 3))
        report = evaluate_batch([(y, y, "a")])
        assert report.mean_cd_times_1e3 == 0.0 and report.f_score_at_tau == 1.0

    def test_arithmetic_mean(self):
        # one-point clouds at distance d have CD 2 d^2
        def pair(cd):
            d = np.sqrt(cd / 2)
            return np.zeros((1, 3)), np.array([[d, 0.0, 0.0]]), "a"

        assert evaluate_batch([pair(2e-3), pair(4e-3)]).mean_cd_times_1e3 == pytest.approx(3.0)

    def test_categories_independent_of_order(self, rng):
        pairs = [(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), cat) for cat in "ABB"]
        forward = evaluate_batch(pairs, tau=0.5)
        backward = evaluate_batch(pairs[::-1], tau=0.5)
        assert forward.per_category == backward.per_category
        b_cds = [chamfer_value(y, h) for y, h, c in pairs if c == "B"]
        assert forward.per_category["B"][0] == pytest.approx(np.mean(b_cds) * 1e3, rel=1e-12)
        assert forward.category_counts == {"A": 1, "B": 2}

    def test_csv_and_json(self, rng):
        pairs = [(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), cat) for cat in "BA"]
        report = evaluate_batch(pairs, tau=0.5)
        lines = report.to_csv().splitlines()
        assert tuple(lines[0].split(",")) == CSV_COLUMNS
        assert [line.split(",")[0] for line in lines[1:]] == ["A", "B", "average"]
        data = json.loads(report.to_json())
        assert data["count"] == 2 and set(data["per_category"]) == {"A", "B"}
        assert isinstance(report, MetricsReport)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            evaluate_batch([])
