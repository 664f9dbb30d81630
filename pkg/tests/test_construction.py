import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wmlab.construction import (WatermarkSpec, build_watermark_dataset, class_means, compose_batch,
                                compose_watermark_sample, draw_composites, kmeans, representatives,
                                select_source_classes, select_target_label,
                                target_label_from_probabilities)
from wmlab.data import LabeledDataset, make_synthetic_dataset

# 4 well separated corners (classes 0-3) and one close satellite per corner (classes 4-7).
# Coordinates are dyadic so cluster means and distances are exact.
CORNERS = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
EIGHT_CENTROIDS = np.concatenate([CORNERS, CORNERS + [0.5, 0.0]])


# --------------------------------------------------------------------------- centroids

def test_centroid_of_identical_samples():
    feats = np.tile([[0.3, -1.7, 2.0]], (5, 1))
    cm = class_means(feats, np.zeros(5, dtype=np.int64), 1)
    assert np.array_equal(cm.centroids[0], feats[0])


def test_centroid_hand_example():
    cm = class_means(np.array([[1.0, 0.0], [3.0, 2.0]]), np.array([0, 0]), 1)
    assert cm.centroids[0].tolist() == [2.0, 1.0]
    assert cm.counts.tolist() == [2]


def test_centroid_missing_class_named():
    with pytest.raises(ValueError, match="class 1 has no samples"):
        class_means(np.zeros((2, 2)), np.array([0, 2]), 3)


# --------------------------------------------------------------------------- source classes

def _partitions(n: int, k: int):
    """All assignments of n labelled points to k unlabelled non-empty blocks."""
    def rec(i, assign, used):
        if i == n:
            if used == k:
                yield list(assign)
            return
        for b in range(min(used + 1, k)):
            assign.append(b)
            yield from rec(i + 1, assign, max(used, b + 1))
            assign.pop()
    yield from rec(0, [], 0)


def brute_force_selection(points: np.ndarray, k: int) -> list[int]:
    """Global K-means optimum by exhaustive search, then nearest class per center."""
    best, best_cost = None, math.inf
    for assign in _partitions(len(points), k):
        assign = np.array(assign)
        centers = np.array([points[assign == b].mean(axis=0) for b in range(k)])
        cost = sum(((points[assign == b] - centers[b]) ** 2).sum() for b in range(k))
        if cost < best_cost - 1e-12:
            best, best_cost = centers, cost
    chosen = []
    for m in best:
        d = np.sqrt(((points - m) ** 2).sum(-1))
        chosen.append(min((j for j in range(len(points)) if j not in chosen), key=lambda j: (d[j], j)))
    return sorted(chosen)


def test_four_classes_are_all_selected():
    pts = np.random.default_rng(0).normal(size=(4, 3))
    assert select_source_classes(pts, 4, seed=0) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(20))
def test_eight_centroid_fixture_matches_brute_force(seed):
    oracle = brute_force_selection(EIGHT_CENTROIDS, 4)
    assert oracle == [0, 1, 2, 3]
    assert select_source_classes(EIGHT_CENTROIDS, 4, seed=seed) == oracle


def test_too_few_classes():
    with pytest.raises(ValueError):
        select_source_classes(np.zeros((3, 2)), 4)


def test_representative_collision_takes_next_nearest():
    pts = np.array([[0.0], [1.0], [5.0]])
    assert representatives(pts, np.array([[0.1], [0.2]])) == [0, 1]


def test_kmeans_converges_to_cluster_means():
    pts = np.concatenate([np.zeros((3, 2)), np.full((3, 2), 4.0)])
    centers, assign = kmeans(pts, 2, seed=0)
    assert sorted(centers[:, 0].tolist()) == [0.0, 4.0]
    assert len(set(assign[:3])) == 1 and len(set(assign[3:])) == 1


@settings(max_examples=40, deadline=None)
@given(points=arrays(np.float64, st.tuples(st.integers(4, 12), st.integers(1, 4)),
                     elements=st.floats(-100, 100, allow_nan=False)),
       seed=st.integers(0, 2**16))
def test_selection_always_returns_four_distinct_classes(points, seed):
    chosen = select_source_classes(points, 4, seed)
    assert len(chosen) == len(set(chosen)) == 4
    assert chosen == sorted(chosen)
    assert all(0 <= c < len(points) for c in chosen)


# --------------------------------------------------------------------------- composites

def test_constant_sources_give_constant_composite():
    gray = np.full((4, 1, 32, 32), 128, np.uint8)
    spec = WatermarkSpec((0, 1, 2, 3), 4, (1, 32, 32))
    out = compose_watermark_sample(gray, spec)
    assert out.shape == (1, 32, 32)
    assert (out == 128).all()


def test_nearest_quadrants_are_decimated_sources():
    src = np.arange(4 * 16, dtype=np.uint8).reshape(4, 1, 4, 4) * 3
    out = compose_batch(src[None], "nearest")[0]
    quads = [out[:, :2, :2], out[:, :2, 2:], out[:, 2:, :2], out[:, 2:, 2:]]
    for q, s in zip(quads, src):
        assert np.array_equal(q, s[:, ::2, ::2])


def test_bilinear_half_size_is_block_mean():
    rng = np.random.default_rng(0)
    src = rng.integers(0, 256, size=(3, 4, 2, 6, 8), dtype=np.uint8)
    out = compose_batch(src, "bilinear")
    blocks = src.astype(np.float64).reshape(3, 4, 2, 3, 2, 4, 2).mean(axis=(4, 6))
    expected = np.rint(blocks).astype(np.uint8)
    assert np.array_equal(out[:, :, :3, :4], expected[:, 0])
    assert np.array_equal(out[:, :, :3, 4:], expected[:, 1])
    assert np.array_equal(out[:, :, 3:, :4], expected[:, 2])
    assert np.array_equal(out[:, :, 3:, 4:], expected[:, 3])


def test_spec_validation():
    with pytest.raises(ValueError, match="4 distinct"):
        WatermarkSpec((0, 1, 2), 3, (1, 8, 8))
    with pytest.raises(ValueError, match="4 distinct"):
        WatermarkSpec((0, 1, 2, 2), 3, (1, 8, 8))
    with pytest.raises(ValueError, match="even"):
        WatermarkSpec((0, 1, 2, 3), 3, (1, 7, 8))
    with pytest.raises(ValueError, match="permutation"):
        WatermarkSpec((0, 1, 2, 3), 3, (1, 8, 8), layout=(0, 1, 2, 5))
    spec = WatermarkSpec((3, 1, 2, 0), 5, (1, 8, 8))
    assert spec.layout == (0, 1, 2, 3)
    assert WatermarkSpec.from_dict(spec.to_dict()) == spec


def test_draw_requires_positive_count(synthetic):
    with pytest.raises(ValueError, match="count must be positive"):
        draw_composites(synthetic, (0, 1, 2, 3), 0, seed=0)


def test_absent_source_class_is_named(synthetic):
    data = synthetic.subset(np.flatnonzero(synthetic.labels != 2))
    spec = WatermarkSpec((0, 1, 2, 3), 0, (1, 8, 8))
    with pytest.raises(ValueError, match="source class 2"):
        build_watermark_dataset(data, spec, 5, seed=0)


def test_watermark_set_is_reproducible():
    data = make_synthetic_dataset(num_classes=6, per_class=20, size=8)
    spec = WatermarkSpec((0, 2, 3, 5), 1, (1, 8, 8))
    a = build_watermark_dataset(data, spec, 500, seed=9)
    b = build_watermark_dataset(data, spec, 500, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, build_watermark_dataset(data, spec, 500, seed=10).images)


def test_watermark_samples_have_target_label_and_source_quadrants():
    data = make_synthetic_dataset(num_classes=6, per_class=20, size=8)
    spec = WatermarkSpec((4, 0, 3, 5), 2, (1, 8, 8), resize_filter="nearest")
    wm = build_watermark_dataset(data, spec, 100, seed=1)
    assert (wm.labels == 2).all()
    for img, picks in zip(wm.images, wm.provenance):
        assert [int(data.labels[p]) for p in picks] == [0, 3, 4, 5]
        src = data.images[picks]
        assert np.array_equal(img[:, :4, :4], src[0][:, ::2, ::2])
        assert np.array_equal(img[:, :4, 4:], src[1][:, ::2, ::2])
        assert np.array_equal(img[:, 4:, :4], src[2][:, ::2, ::2])
        assert np.array_equal(img[:, 4:, 4:], src[3][:, ::2, ::2])


# --------------------------------------------------------------------------- target label

def test_target_label_hand_example():
    probs = np.array([[0.5, 0.3, 0.2], [0.3, 0.3, 0.4]])
    assert target_label_from_probabilities(probs) == 1


def test_target_label_uniform_tie():
    assert target_label_from_probabilities(np.full((7, 5), 0.2)) == 0


def test_target_label_from_stub_model():
    logits = torch.log(torch.tensor([0.1, 0.6, 0.05, 0.25]))
    stub = lambda x: logits.expand(len(x), -1)  # noqa: E731
    assert select_target_label(stub, np.zeros((3, 1, 4, 4), np.uint8)) == 2


def _prob_tables():
    return arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(2, 8)),
                  elements=st.floats(0.0, 1.0, allow_nan=False)).map(
        lambda a: (a + 1e-3) / (a + 1e-3).sum(axis=1, keepdims=True))


@settings(max_examples=60, deadline=None)
@given(probs=_prob_tables(), seed=st.integers(0, 1000))
def test_target_label_ignores_sample_order(probs, seed):
    perm = np.random.default_rng(seed).permutation(len(probs))
    assert target_label_from_probabilities(probs) == target_label_from_probabilities(probs[perm])


@settings(max_examples=60, deadline=None)
@given(probs=_prob_tables())
def test_target_label_equals_enumeration_oracle(probs):
    # exact rational column means via enumeration over classes
    from fractions import Fraction
    means = [sum(Fraction(float(p)) for p in probs[:, j]) / len(probs) for j in range(probs.shape[1])]
    lowest = min(means)
    assert target_label_from_probabilities(probs) == means.index(lowest)


def test_target_label_rejects_empty():
    with pytest.raises(ValueError):
        target_label_from_probabilities(np.zeros((0, 3)))


def test_layout_permutations_are_all_valid():
    for layout in itertools.permutations((1, 4, 6, 9)):
        spec = WatermarkSpec((1, 4, 6, 9), 0, (3, 4, 4), layout=layout)
        assert spec.layout == layout


def test_compose_rejects_wrong_shape():
    spec = WatermarkSpec((0, 1, 2, 3), 4, (1, 8, 8))
    with pytest.raises(ValueError):
        compose_watermark_sample(np.zeros((4, 1, 4, 4), np.uint8), spec)


def test_class_count_mismatch_for_dataset():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 4, 4), np.uint8), [0, 1, 2], 3)
