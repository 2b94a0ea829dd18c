import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import known_pairing_data, recovers_generating_pairing
from reviewlearn.data import Dataset, angle_task, gen_synthetic
from reviewlearn.errors import SchemaError
from reviewlearn.hetero import (
    GmmModel,
    assign_by_density,
    build_heterogeneous_institutions,
    fit_gmm,
    fit_logreg,
    mean_pairwise_angle,
    pairwise_angles,
)


def monotone(trace, slack=1e-9):
    return all(b - a >= -slack for a, b in zip(trace, trace[1:]))


class TestGmm:
    def test_single_component(self):
        X = np.random.default_rng(0).normal([1.0, -2.0], [0.5, 3.0], size=(500, 2))
        g = fit_gmm(X, 1)
        np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(g.variances[0], X.var(axis=0), rtol=1e-10)
        assert g.weights[0] == 1.0

    def test_two_clusters(self):
        rng = np.random.default_rng(1)
        X = np.concatenate([rng.normal(-5, 1, size=(400, 1)), rng.normal(5, 1, size=(400, 1))])
        g = fit_gmm(X, 2, seed=3)
        assert np.allclose(np.sort(g.means[:, 0]), [-5, 5], atol=0.2)
        assert monotone(g.log_likelihood)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_monotone_likelihood(self, k, seed):
        X = np.random.default_rng(seed).normal(size=(120, 3)) * [1, 2, 0.5]
        g = fit_gmm(X, k, seed=seed)
        assert monotone(g.log_likelihood)
        assert np.all(g.variances >= 1e-6)
        assert g.weights.sum() == pytest.approx(1.0)

    def test_too_few_rows(self):
        with pytest.raises(SchemaError):
            fit_gmm(np.zeros((2, 1)), 3)


class TestDensityAssignment:
    def test_single_component(self):
        X = np.random.default_rng(0).normal(size=(50, 2))
        assert np.all(assign_by_density(X, fit_gmm(X, 1), np.random.default_rng(0)) == 0)

    def test_row_at_mean_dominates(self):
        g = GmmModel(np.array([0.5, 0.5]), np.array([[-10.0], [10.0]]), np.ones((2, 1)))
        X = np.full((1000, 1), 10.0)
        hits = assign_by_density(X, g, np.random.default_rng(4)) == 1
        assert hits.mean() >= 0.99

    def test_counts_match_weights(self):
        rng = np.random.default_rng(2)
        X = np.concatenate([rng.normal(-6, 1, size=(700, 1)), rng.normal(6, 1, size=(300, 1))])
        g = fit_gmm(X, 2, seed=0)
        comp = assign_by_density(X, g, np.random.default_rng(9))
        n = X.shape[0]
        for k in range(2):
            p = g.weights[k]
            assert abs(np.sum(comp == k) - n * p) <= 3 * math.sqrt(n * p * (1 - p))

    def test_dimension_mismatch(self):
        g = fit_gmm(np.random.default_rng(0).normal(size=(20, 2)), 1)
        with pytest.raises(SchemaError):
            assign_by_density(np.zeros((3, 5)), g, np.random.default_rng(0))


class TestLogReg:
    def test_sign(self):
        m = fit_logreg(np.array([[-1.0], [1.0]]), np.array([0, 1]))
        assert m.weights[0] > 0

    def test_flip_symmetry(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 3))
        X = np.vstack([X, -X])
        y = (X @ [1.0, -0.5, 0.2] + 0.3 * rng.normal(size=400) > 0).astype(int)
        a = fit_logreg(X, y, max_iter=300)
        b = fit_logreg(X, 1 - y, max_iter=300)
        assert np.linalg.norm(a.weights + b.weights) <= 1e-6

    def test_stopping_contract(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(300, 2))
        y = (X[:, 0] + rng.normal(size=300) > 0).astype(int)
        m = fit_logreg(X, y, tol=1e-6)
        assert m.grad_norm <= 1e-6 and m.n_iter < 5000
        # independent gradient at the returned point
        r = 1 / (1 + np.exp(-(X @ m.weights + m.bias))) - y
        g = np.concatenate([X.T @ r / 300, [r.mean()]])
        assert np.linalg.norm(g) <= 1e-6

    def test_single_class(self):
        with pytest.raises(SchemaError):
            fit_logreg(np.zeros((3, 1)), np.ones(3))


class TestAngles:
    def test_examples(self):
        assert mean_pairwise_angle([np.array([1.0, 0]), np.array([0, 1.0])]) == pytest.approx(math.pi / 2)
        assert mean_pairwise_angle([np.array([1.0, 2]), np.array([1.0, 2])]) == pytest.approx(0.0, abs=1e-7)
        three = [np.array([1.0, 0]), np.array([0, 1.0]), np.array([1.0, 1]) / math.sqrt(2)]
        assert math.degrees(mean_pairwise_angle(three)) == pytest.approx(60.0)

    def test_opposite_is_pi(self):
        assert mean_pairwise_angle([np.array([1.0, 0]), np.array([-2.0, 0])]) == pytest.approx(math.pi)

    def test_zero_norm(self):
        with pytest.raises(SchemaError):
            mean_pairwise_angle([np.zeros(2), np.ones(2)])

    @given(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.floats(0.01, 100),
    )
    def test_symmetric_and_scale_invariant(self, a, b, c):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        ang = pairwise_angles([a, b])[0]
        assert pairwise_angles([b, a])[0] == pytest.approx(ang, abs=1e-9)
        assert pairwise_angles([c * a, b])[0] == pytest.approx(ang, abs=1e-6)
        assert 0 <= ang <= math.pi


@pytest.fixture(scope="module")
def three():
    ds = Dataset.concat(gen_synthetic(angle_task([0, 90, 90], [500, 400, 300], case_ratio=0.2), 1))
    return ds, build_heterogeneous_institutions(ds, 3, seed=2)


class TestBuilder:
    def test_single_institution(self):
        ds, _ = known_pairing_data(0, 200)
        a = build_heterogeneous_institutions(ds, 1)
        assert a.names == ["local 1"] and a.sizes == [ds.n_rows]
        assert math.isnan(a.mean_angle)

    def test_recovers_generating_pairing(self):
        ds, origin = known_pairing_data(0)
        a = build_heterogeneous_institutions(ds, 2, seed=0)
        assert recovers_generating_pairing(a, origin)
        assert a.mean_angle > math.radians(60)

    def test_six_candidates(self, three):
        _, a = three
        assert len(a.candidates) == 6
        assert len({c[0] for c in a.candidates}) == 6

    def test_partition_and_naming(self, three):
        ds, a = three
        assert a.institution_of_row.shape == (ds.n_rows,)
        assert sum(a.sizes) == ds.n_rows
        assert a.sizes == sorted(a.sizes, reverse=True)
        assert [int(np.sum(a.institution_of_row == k)) for k in range(3)] == a.sizes
        assert a.names == ["local 1", "local 2", "local 3"]
        for k in range(3):
            assert len(set(ds.labels[a.institution_of_row == k])) == 2

    def test_selected_is_max(self, three):
        _, a = three
        angles = [c[1] for c in a.candidates if c[1] is not None]
        assert a.mean_angle == max(angles)
        # ties break to the first enumerated pairing
        first = next(c for c in a.candidates if c[1] == a.mean_angle)
        assert tuple(p[1] for p in sorted(a.pairing)) == tuple(first[0])

    def test_em_monotone(self, three):
        _, a = three
        assert len(a.gmms) == 2
        assert all(monotone(g.log_likelihood) for g in a.gmms)

    def test_deterministic(self, three):
        ds, a = three
        b = build_heterogeneous_institutions(ds, 3, seed=2)
        assert np.array_equal(a.institution_of_row, b.institution_of_row)
        assert a.mean_angle == b.mean_angle

    def test_export(self, three, tmp_path):
        ds, a = three
        a.save(tmp_path / "a.json")
        import json

        d = json.loads((tmp_path / "a.json").read_text())
        assert len(d["rows"]) == ds.n_rows
        assert [i["size"] for i in d["institutions"]] == a.sizes
        assert d["mean_angle_rad"] == a.mean_angle
