import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cctprobe.clusters import (TABLE_COLUMNS, ClusterReport, StatsRow, block_statistics, clip,
                               extract_clusters, label_coverage, read_stats_csv, write_stats_csv)
from cctprobe.errors import InputError
from cctprobe.probe import FieldMatrix, Subject

from oracles import closure_clusters


def _normalised(seed, L=12):
    m = np.random.default_rng(seed).uniform(-0.5, 1.0, (L, L))
    return m / m.max()


def test_clip_at_one_keeps_only_maxima():
    m = _normalised(0)
    m[3, 4] = 1.0
    B = clip(m, 1.0).mask
    assert set(zip(*np.nonzero(B))) == set(zip(*np.nonzero(m == 1.0)))


def test_clip_with_negative_off_max():
    m = -np.ones((5, 5))
    m[2, 3] = 1.0
    assert clip(m, 0.3).total == 1


def test_clip_boundary_survives():
    m = np.array([[1.0, 0.3], [0.2999999, 0.0]])
    assert clip(m, 0.3).mask.tolist() == [[True, True], [False, False]]


def test_clip_accepts_field_matrix():
    fm = FieldMatrix(np.array([[4.0, 2.0], [1.0, 0.0]]), Subject("head", 0))
    assert clip(fm, 0.5).mask.tolist() == [[True, True], [False, False]]


@pytest.mark.parametrize("theta", [0.0, -0.1, 1.01])
def test_clip_rejects_bad_threshold(theta):
    with pytest.raises(InputError):
        clip(np.eye(3), theta)


def test_clip_rejects_unnormalised_or_non_square():
    with pytest.raises(InputError):
        clip(2 * np.eye(3), 0.5)
    with pytest.raises(InputError):
        clip(np.ones((2, 3)), 0.5)


@settings(max_examples=50)
@given(seed=st.integers(0, 10 ** 6), t1=st.floats(0.01, 1.0), t2=st.floats(0.01, 1.0))
def test_clip_is_monotone(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    m = _normalised(seed)
    b_lo, b_hi = clip(m, lo), clip(m, hi)
    assert not np.any(b_hi.mask & ~b_lo.mask)
    r_lo, r_hi = extract_clusters(b_lo), extract_clusters(b_hi)
    assert r_hi.in_cluster + r_hi.noise <= r_lo.in_cluster + r_lo.noise


def test_identity_gives_singletons():
    report = extract_clusters(np.eye(100, dtype=bool))
    assert report.num_clusters == 100
    assert all(len(c) == 1 for c in report.clusters)
    assert report.diag == 100 and report.noise == 0


def test_hand_evaluated_example():
    B = np.zeros((10, 10), dtype=bool)
    for i, j in [(1, 1), (2, 2), (1, 2), (2, 1), (5, 9)]:
        B[i, j] = True
    report = extract_clusters(B)
    assert report.clusters == [(1, 2)]
    assert report.diag == 2 and report.noise == 1
    assert report.noise_coords == [(5, 9)]
    assert report.permutation[:2] == [1, 2]


def test_mutual_link_without_diagonals_forms_cluster():
    B = np.zeros((4, 4), dtype=bool)
    B[0, 3] = B[3, 0] = True
    report = extract_clusters(B)
    assert report.clusters == [(0, 3)] and report.diag == 0 and report.noise == 0


def test_exhaustive_three_by_three_against_closure_oracle():
    # the full 4 x 4 sweep lives in the acceptance suite
    for bits in itertools.product([False, True], repeat=9):
        B = np.array(bits).reshape(3, 3)
        report = extract_clusters(B)
        clusters, diag, noise = closure_clusters(B)
        assert {frozenset(c) for c in report.clusters} == clusters, bits
        assert (report.diag, report.noise) == (diag, noise), bits


@settings(max_examples=300, deadline=None)
@given(B=st.integers(5, 9).flatmap(lambda n: arrays(bool, (n, n), elements=st.booleans())))
def test_larger_matrices_against_closure_oracle(B):
    report = extract_clusters(B)
    clusters, diag, noise = closure_clusters(B)
    assert {frozenset(c) for c in report.clusters} == clusters
    assert (report.diag, report.noise) == (diag, noise)


boolean_matrices = st.integers(1, 14).flatmap(
    lambda n: arrays(bool, (n, n), elements=st.booleans()))


@settings(max_examples=200, deadline=None)
@given(B=boolean_matrices)
def test_conservation_disjointness_and_permutation(B):
    report = extract_clusters(B)
    assert report.in_cluster + report.noise == int(B.sum())
    seen = [label for c in report.clusters for label in c]
    assert len(seen) == len(set(seen))
    L = len(B)
    assert sorted(report.permutation) == list(range(L))
    position = {label: k for k, label in enumerate(report.permutation)}
    P = B[np.ix_(report.permutation, report.permutation)]
    for c in report.clusters:
        spots = sorted(position[label] for label in c)
        assert spots == list(range(spots[0], spots[0] + len(c)))
        block = P[spots[0]:spots[-1] + 1, spots[0]:spots[-1] + 1]
        assert block.sum() == sum(B[i, j] for i in c for j in c)
    assert report.noise == len(report.noise_coords)


@settings(max_examples=50, deadline=None)
@given(B=boolean_matrices, theta=st.sampled_from([0.3, 0.6, None]))
def test_report_json_round_trip(B, theta):
    report = extract_clusters(B)
    report.theta = theta
    assert ClusterReport.from_json(report.to_json()) == report


def _report(clusters, noise, L=100):
    return ClusterReport([tuple(c) for c in clusters], diag=len(clusters), noise=noise,
                         in_cluster=0, permutation=list(range(L)))


def test_external_noise_example():
    reports = [_report([(k,)], noise) for k, noise in enumerate([10, 12, 15, 13])]
    row = block_statistics(reports, 100)
    assert math.isclose(row.n, 12.5)
    assert math.isclose(row.n_noise, 0.005, rel_tol=1e-12)


def test_internal_noise_example():
    # 290 memberships in 240 clusters: N_label = 2.9, C_s = 29/24
    clusters = [(k, k + 1) for k in range(0, 100, 2)] + [(k,) for k in range(100)] * 2
    clusters = clusters[:240]
    assert sum(map(len, clusters)) == 290
    row = block_statistics([_report(clusters, 0)], 100)
    assert math.isclose(row.n_label, 2.9)
    assert math.isclose(row.n_inter, 2.9 * (29 / 24 - 1) / 100, rel_tol=1e-12)
    # with the paper-rounded C_s = 1.21 the same identity gives 0.00609
    assert math.isclose(2.9 * 0.21 / 100, 0.00609, rel_tol=1e-12)


def test_snr_example():
    assert math.isclose(1.5 / (0.005 + 0.0004), 277.8, rel_tol=1e-4)
    reports = [_report([(k,) for k in range(37)] + [(37, 38)], 12) for _ in range(4)]
    row = block_statistics(reports, 100)
    assert math.isclose(row.snr, row.n_label / (row.n_noise + row.n_inter), rel_tol=1e-12)


def test_many_heads_noise_example():
    noise = [139] * 16 + [140] * 6 + [139.3 * 32 - 139 * 16 - 140 * 6 - 139 * 9] + [139] * 9
    reports = [_report([(0,)], n) for n in noise]
    row = block_statistics(reports, 100)
    assert math.isclose(row.n, 139.3, rel_tol=1e-12)
    assert math.isclose(row.n_noise, 32 * 139.3 / 100 ** 2, rel_tol=1e-12)
    assert round(row.n_noise, 4) == 0.4458


def test_zero_clusters_is_an_error():
    with pytest.raises(InputError):
        block_statistics([_report([], 3)], 100)
    with pytest.raises(InputError):
        block_statistics([], 100)


def test_snr_infinite_without_noise():
    row = block_statistics([_report([(k,) for k in range(10)], 0, L=10)], 10)
    assert row.snr == math.inf


@st.composite
def report_sets(draw):
    L = draw(st.integers(2, 30))
    heads = draw(st.integers(1, 6))
    reports = []
    for _ in range(heads):
        B = draw(arrays(bool, (L, L), elements=st.booleans()))
        np.fill_diagonal(B, True)        # at least one cluster per head
        reports.append(extract_clusters(B))
    return reports, L


@settings(max_examples=100, deadline=None)
@given(data=report_sets())
def test_label_identity_and_coverage(data):
    reports, L = data
    row = block_statistics(reports, L)
    assert abs(row.n_label - len(reports) * row.n_c * row.c_s / L) <= 1e-12 * max(1.0, row.n_label)
    counts = label_coverage(reports, L)
    assert math.isclose(counts.mean(), row.n_label, rel_tol=1e-12)
    for value in (row.n_c, row.c_s, row.diag, row.n, row.n_label, row.n_noise, row.n_inter, row.snr):
        assert value >= 0


def test_coverage_examples():
    identity = extract_clusters(np.eye(8, dtype=bool))
    assert label_coverage([identity], 8).tolist() == [1] * 8
    assert block_statistics([identity], 8).n_label == 1.0
    heads = [_report([(k,) for k in range(h * 25, h * 25 + 25)], 0) for h in range(4)]
    counts = label_coverage(heads, 100)
    assert counts.max() == 1 and counts.min() == 1


def test_stats_csv_round_trip(tmp_path):
    rows = [StatsRow(7, 0.78, 38.5, 1.01, 38.5, 12.5, 1.5, 0.005, 0.0004, 277.2),
            StatsRow("6", math.nan, 1.0, 1.0, 0.0, 0.0, 0.01, 0.0, 0.0, math.inf)]
    path = tmp_path / "stats.csv"
    write_stats_csv(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(TABLE_COLUMNS)
    back = read_stats_csv(path)
    assert back[0] == StatsRow("7", 0.78, 38.5, 1.01, 38.5, 12.5, 1.5, 0.005, 0.0004, 277.2)
    assert math.isnan(back[1].attn_acc) and back[1].snr == math.inf
