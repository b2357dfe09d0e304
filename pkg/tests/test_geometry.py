import math

import numpy as np
import pytest

from recency_lab.models.errors import DegenerateSpread, EmptyGroup, ZeroVector
from recency_lab.services import geometry

from .conftest import make_acts


def _line_acts(m=4, n_per=30, dim=6, spacing=1.0, sigma=0.05, seed=0):
    """Stages whose centroids sit at k * spacing along e0, plus a bend along e1 for curvature."""
    rng = np.random.default_rng(seed)
    stages = np.repeat(np.arange(1, m + 1), n_per)
    data = rng.normal(scale=sigma, size=(len(stages), 1, 1, dim))
    data[:, 0, 0, 0] += (stages - 1) * spacing
    data[:, 0, 0, 1] += 0.3 * ((stages - 1) - (m - 1) / 2) ** 2
    return make_acts(data, stages)


def test_centroids_are_exact_means():
    acts = _line_acts()
    cs = geometry.centroids(acts, 0, 0)
    assert cs.stages == [1, 2, 3, 4]
    assert cs.counts == [30, 30, 30, 30]
    np.testing.assert_allclose(cs.of(3), acts.cell(0, 0)[acts.stages == 3].mean(axis=0), rtol=1e-6)


def test_centroids_missing_stage():
    acts = _line_acts(m=2)
    with pytest.raises(EmptyGroup):
        geometry.centroids(acts, 0, 0, stages=[1, 2, 3])


def test_recency_axis_points_toward_last_stage():
    cs = geometry.centroids(_line_acts(), 0, 0)
    axis = geometry.recency_basis([cs])
    px = geometry.project(cs.vectors, axis)[:, 0]
    assert axis.x[0] > 0.9
    assert abs(float(axis.x @ axis.y)) < geometry.ORTHO_TOL
    assert math.isclose(np.linalg.norm(axis.y), 1.0, rel_tol=1e-9)
    assert geometry.ordering_score(px) == pytest.approx(1.0)


def test_diffmean_axis_zero_vector():
    v = np.ones(4)
    with pytest.raises(ZeroVector):
        geometry.diffmean_axis([(v, v.copy())])


def test_residual_axis_degenerate_for_collinear_pair():
    x = np.array([1.0, 0.0, 0.0])
    centroids = np.array([[0.0, 1.0, 2.0], [3.0, 1.0, 2.0]])
    with pytest.raises(DegenerateSpread):
        geometry.residual_pc_axis(centroids, x)


def test_ordering_score_reversed_and_ties():
    assert geometry.ordering_score([3.0, 2.0, 1.0, 0.0]) == pytest.approx(-1.0)
    assert geometry.ordering_score([1.0, 1.0, 1.0]) == 0.0
    assert geometry.ordering_score([0.0, 2.0, 1.0], true_order=[0, 2, 1]) == pytest.approx(1.0)


def test_collinearity_residual_values():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    assert geometry.collinearity_residual(line) == pytest.approx(0.0, abs=1e-12)
    triangle = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    assert geometry.collinearity_residual(triangle) == pytest.approx(1 / math.sqrt(2))


def test_pca_ratios_sum_to_at_most_one():
    rows = np.random.default_rng(1).normal(size=(50, 5)) * np.array([5.0, 2.0, 1.0, 0.5, 0.1])
    components, ratios = geometry.pca(rows, 3)
    np.testing.assert_allclose(components @ components.T, np.eye(3), atol=1e-10)
    assert ratios[0] >= ratios[1] >= ratios[2]
    assert ratios.sum() <= 1.0 + 1e-12
    assert abs(components[0, 0]) > 0.9


def test_cosine_stats_within_and_between():
    groups = {
        "a": np.array([[1.0, 0.0], [2.0, 0.0]]),
        "b": np.array([[0.0, 1.0], [0.0, 3.0]]),
        "c": np.array([[1.0, 1.0]]),
    }
    out = geometry.cosine_stats(groups)
    assert out.within["a"] == pytest.approx(1.0)
    assert out.between[("a", "b")] == pytest.approx(0.0)
    assert math.isnan(out.within["c"])
    assert list(out.to_frame().columns) == ["group_a", "group_b", "mean_cosine"]


def test_probe_cosine_matrix_is_symmetric_unit_diagonal():
    dirs = np.random.default_rng(0).normal(size=(4, 6))
    grid = geometry.probe_cosine_matrix(dirs)
    np.testing.assert_allclose(np.diag(grid), 1.0)
    np.testing.assert_allclose(grid, grid.T)


def test_projection_frame_has_one_row_per_centroid():
    sets = [geometry.centroids(_line_acts(seed=s), 0, 0, run=f"run{s}") for s in range(3)]
    axis = geometry.recency_basis(sets)
    frame = geometry.projection_frame(sets, axis)
    assert list(frame.columns) == geometry.PROJECTION_COLUMNS
    assert len(frame) == 12
    assert set(frame["run"]) == {"run0", "run1", "run2"}


def test_scaled_projection_maps_centroids_to_unit_endpoints():
    c_first, c_last = np.array([0.0, 1.0]), np.array([2.0, 1.0])
    out = geometry.scaled_diffmean_projection(np.stack([c_first, c_last, (c_first + c_last) / 2]), c_first, c_last)
    np.testing.assert_allclose(out, [-1.0, 1.0, 0.0])


def test_histogram_counts_share_edges():
    values = np.array([0.0, 0.1, 0.9, 1.0])
    frame = geometry.histogram_counts(values, np.array([1, 1, 2, 2]), bins=2)
    assert frame.groupby("group")["count"].sum().to_dict() == {1: 2, 2: 2}
    assert frame[frame.group == 1]["bin_left"].tolist() == frame[frame.group == 2]["bin_left"].tolist()


def test_centroid_pca_view_reports_plane_fraction():
    acts = _line_acts()
    cs = geometry.centroids(acts, 0, 0)
    view = geometry.centroid_pca_view(cs.vectors, acts.cell(0, 0))
    assert len(view["coords"]) == 4
    assert view["explained_ratio"][0] > 0.5
    assert 0.9 < view["plane_fraction"] <= 1.0


def test_seen_unseen_axis_points_from_seen_to_unseen():
    pairs = [(np.array([2.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])),
             (np.array([3.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))]
    axis = geometry.seen_unseen_axis(pairs)
    np.testing.assert_allclose(axis, [1.0, 0.0, 0.0], atol=1e-12)
    with pytest.raises(ZeroVector):
        geometry.seen_unseen_axis([(np.ones(3), np.ones(3))])


@pytest.mark.parametrize("m", [2, 3, 6, 12])
def test_perfect_order_scores_exactly_one(m):
    assert geometry.ordering_score(list(range(m))) == 1.0
    positions = np.cumsum(np.random.default_rng(m).uniform(0.1, 3.0, size=m))
    assert geometry.ordering_score(positions) == 1.0
    assert geometry.ordering_score(positions[::-1]) == -1.0


def test_one_adjacent_swap_in_six_stages():
    assert geometry.ordering_score([0.0, 1.0, 3.0, 2.0, 4.0, 5.0]) == pytest.approx(13 / 15)


def test_diffmean_axis_rotates_with_the_space():
    rng = np.random.default_rng(4)
    dim = 7
    pairs = [(rng.normal(size=dim) + 1.0, rng.normal(size=dim)) for _ in range(5)]
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    rotated = [(q @ a, q @ b) for a, b in pairs]
    np.testing.assert_allclose(geometry.diffmean_axis(rotated), q @ geometry.diffmean_axis(pairs), atol=1e-10)


def test_pca_of_isotropic_noise_splits_variance_evenly():
    dim = 8
    rows = np.random.default_rng(2).normal(size=(50000, dim))
    _, ratios = geometry.pca(rows, dim)
    assert ratios.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(ratios, 1.0 / dim, rtol=0.05)
