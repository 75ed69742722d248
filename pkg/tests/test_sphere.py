import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wcmorph import sphere
from wcmorph.errors import DegeneratePairError, FormatError, InvariantError


def e(i, dim=16):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def random_pairs(n, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    return sphere.sample_sphere(n, dim, rng), sphere.sample_sphere(n, dim, rng)


class TestAngle:
    def test_examples(self):
        assert sphere.angle(e(0), e(0)) == 0.0
        assert sphere.angle(e(0), e(1)) == pytest.approx(math.pi / 2, abs=1e-15)
        assert sphere.angle(e(0), -e(0)) == pytest.approx(math.pi, abs=1e-15)

    def test_non_unit(self):
        with pytest.raises(InvariantError):
            sphere.angle(2 * e(0), e(1))

    def test_symmetric(self):
        a, b = random_pairs(50)
        np.testing.assert_array_equal(sphere.angle(a, b), sphere.angle(b, a))


class TestWorstCase:
    def test_orthonormal(self):
        z = sphere.worst_case_embedding(e(0), e(1))
        expect = np.zeros(16)
        expect[:2] = math.sqrt(2) / 2
        np.testing.assert_allclose(z, expect, atol=1e-15)
        assert sphere.worst_case_score(e(0), e(1)) == pytest.approx(math.pi / 4, abs=1e-15)
        assert math.cos(sphere.worst_case_score(e(0), e(1))) == pytest.approx(0.7071067811865476, abs=1e-12)

    def test_idempotent(self):
        a, _ = random_pairs(1)
        np.testing.assert_allclose(sphere.worst_case_embedding(a[0], a[0]), a[0], atol=1e-15)
        assert sphere.worst_case_score(a[0], a[0]) == pytest.approx(0.0, abs=1e-7)

    def test_antipodal(self):
        with pytest.raises(DegeneratePairError):
            sphere.worst_case_embedding(e(0), -e(0))
        with pytest.raises(DegeneratePairError):
            sphere.worst_case_score(e(0), -e(0))

    def test_equal_half_angles_1000_pairs(self):
        a, b = random_pairs(1000, seed=1)
        z = sphere.worst_case_embedding(a, b)
        t1, t2, t = sphere.angle(a, z), sphere.angle(b, z), sphere.angle(a, b)
        assert np.max(np.abs(t1 - t2)) < 1e-9
        assert np.max(np.abs(t1 - t / 2)) < 1e-9
        assert np.max(np.abs(np.linalg.norm(z, axis=1) - 1)) < 1e-12

    def test_swap_invariant(self):
        a, b = random_pairs(100, seed=2)
        np.testing.assert_array_equal(sphere.worst_case_embedding(a, b), sphere.worst_case_embedding(b, a))

    def test_objective_examples(self):
        a, b = random_pairs(1, seed=3)
        a, b = a[0], b[0]
        theta = sphere.angle(a, b)
        assert sphere.eq1_objective(a, a, b) == pytest.approx(theta, abs=1e-12)
        z = sphere.worst_case_embedding(a, b)
        assert sphere.eq1_objective(z, a, b) == pytest.approx(theta / 2, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-1, 1)))
    def test_closed_form_is_lower_bound(self, raw):
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms < 1e-3):
            return
        z1, z2, z = raw / norms
        if np.linalg.norm(z1 + z2) < 1e-6:
            return
        star = sphere.worst_case_embedding(z1, z2)
        assert sphere.eq1_objective(star, z1, z2) <= sphere.eq1_objective(z, z1, z2) + 1e-12


class TestBruteForce:
    def test_orthonormal_oracle(self):
        _, obj = sphere.brute_force_worst_case(e(0), e(1), n_samples=100_000, seed=0)
        assert abs(obj - math.pi / 4) < 1e-3

    def test_equal_inputs(self):
        z, obj = sphere.brute_force_worst_case(e(3), e(3), n_samples=1000)
        np.testing.assert_array_equal(z, e(3))
        assert obj == 0.0

    def test_never_beats_closed_form(self):
        a, b = random_pairs(20, seed=4)
        for z1, z2 in zip(a, b):
            z, obj = sphere.brute_force_worst_case(z1, z2, n_samples=20_000, seed=5)
            assert obj >= sphere.worst_case_score(z1, z2) - 1e-12
            # the sweep along the arc gets within grid resolution of the optimum
            assert obj - sphere.worst_case_score(z1, z2) < sphere.angle(z1, z2) / 2000 + 1e-12
            assert sphere.eq1_objective(sphere.worst_case_embedding(z1, z2), z1, z2) <= obj + 1e-12

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            sphere.brute_force_worst_case(e(0), e(1), n_samples=10)


def test_euclidean_midpoint_against_plane_grid():
    rng = np.random.default_rng(6)
    z1, z2 = rng.normal(size=2) * 3, rng.normal(size=2) * 3
    xs = np.linspace(-8, 8, 1601)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    obj = sphere.eq1_objective(grid, z1, z2, "euclidean")
    best = grid[np.argmin(obj)]
    mid = sphere.euclidean_worst_case(z1, z2)
    assert np.linalg.norm(best - mid) < 0.1
    assert sphere.eq1_objective(best, z1, z2, "euclidean") - sphere.eq1_objective(mid, z1, z2, "euclidean") < 1e-3
    assert sphere.eq1_objective(mid, z1, z2, "euclidean") <= obj.min() + 1e-12


class TestEmbeddingCsv:
    def test_round_trip(self, tmp_path):
        a, _ = random_pairs(5)
        path = tmp_path / "emb.csv"
        sphere.save_embeddings(path, [f"p{i}" for i in range(5)], a)
        assert path.read_text().splitlines()[0] == "id," + ",".join(f"dim{i}" for i in range(16))
        ids, back = sphere.load_embeddings(path)
        assert ids == [f"p{i}" for i in range(5)]
        np.testing.assert_array_equal(back, a)

    def test_norm_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,dim0,dim1\nx,1.0,1.0\n")
        with pytest.raises(InvariantError):
            sphere.load_embeddings(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("name,a\nx,1.0\n")
        with pytest.raises(FormatError):
            sphere.load_embeddings(path)
