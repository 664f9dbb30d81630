import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wmlab.construction import WatermarkSpec, build_watermark_dataset
from wmlab.data import make_synthetic_dataset
from wmlab.embedding import (LOG_COLUMNS, CouplingState, EmbeddingConfig, LossWeights, coupling_loss,
                             embed_watermark, total_loss, update_centroids, write_training_log)
from wmlab.models import build_model, parameters_equal
from wmlab.training import TrainingDiverged, TrainingSchedule
from wmlab.verification import watermark_success_rate

DEFAULT_WEIGHTS = LossWeights(wm=1.0, coupling=1.0, intra=0.01, inter=3.0)


def _state(centroids, margin=1.0, dtype=torch.float64):
    c = torch.as_tensor(centroids, dtype=dtype)
    state = CouplingState(c.shape[0], c.shape[1], margin=margin, dtype=dtype)
    state.centroids[:] = c
    state.initialized[:] = True
    return state


# --------------------------------------------------------------------------- coupling loss

def test_coupling_zero_when_on_centroid_and_outside_margin():
    state = _state([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], margin=1.0)
    feats = state.centroids[[0, 1, 2, 1]].clone()
    intra, inter = coupling_loss(feats, torch.tensor([0, 1, 2, 1]), state)
    assert intra.item() == 0.0
    assert inter.item() == 0.0


def test_coupling_hand_example():
    state = _state([[1.0], [0.5]], margin=2.0)
    intra, inter = coupling_loss(torch.tensor([[0.0]], dtype=torch.float64), torch.tensor([0]), state)
    assert intra.item() == 1.0
    assert inter.item() == 2.25


def test_coupling_ignores_uninitialized_foreign_centroids():
    state = _state([[1.0], [0.5]], margin=2.0)
    state.initialized[1] = False
    _, inter = coupling_loss(torch.tensor([[0.0]], dtype=torch.float64), torch.tensor([0]), state)
    assert inter.item() == 0.0


def test_coupling_requires_initialized_class():
    state = CouplingState(3, 2)
    update_centroids(state, torch.zeros(1, 2), torch.tensor([0]))
    with pytest.raises(RuntimeError, match="not initialized"):
        coupling_loss(torch.zeros(2, 2), torch.tensor([0, 2]), state)


def _central_difference(fn, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = fn(x).item()
        flat[i] = old - eps
        lo = fn(x).item()
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


@pytest.mark.parametrize("trial", range(10))
def test_coupling_gradient_matches_finite_differences(trial):
    gen = torch.Generator().manual_seed(trial)
    n, d, c = 6, 5, 4
    state = _state(torch.randn(c, d, generator=gen, dtype=torch.float64), margin=2.5)
    labels = torch.randint(0, c, (n,), generator=gen)
    feats = torch.randn(n, d, generator=gen, dtype=torch.float64)

    def loss(f):
        intra, inter = coupling_loss(f, labels, state)
        return 0.01 * intra + 3.0 * inter

    f = feats.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(loss(f), f)
    numeric = _central_difference(loss, feats.clone())
    rel = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    assert rel <= 1e-4
    assert state.centroids.grad is None


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), margin=st.floats(0.1, 5.0))
def test_coupling_terms_are_nonnegative(seed, margin):
    gen = torch.Generator().manual_seed(seed)
    state = _state(torch.randn(3, 4, generator=gen, dtype=torch.float64), margin=margin)
    intra, inter = coupling_loss(torch.randn(7, 4, generator=gen, dtype=torch.float64),
                                 torch.randint(0, 3, (7,), generator=gen), state)
    assert intra.item() >= 0 and inter.item() >= 0


# --------------------------------------------------------------------------- total loss

def test_total_loss_with_default_weights():
    assert total_loss(1.0, 1.0, 1.0, 1.0, DEFAULT_WEIGHTS) == 5.01


def test_total_loss_degenerate_cases():
    zero = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert total_loss(0.7, 3.0, 2.0, 9.0, zero) == 0.7
    assert total_loss(0.0, 0.0, 0.0, 0.0, DEFAULT_WEIGHTS) == 0.0


@settings(max_examples=50, deadline=None)
@given(parts=st.tuples(*[st.floats(0, 100)] * 4), k=st.sampled_from([0.5, 2.0, 4.0]),
       which=st.integers(0, 3))
def test_total_loss_is_linear_in_each_component(parts, k, which):
    scaled = list(parts)
    scaled[which] *= k
    weights = [1.0, DEFAULT_WEIGHTS.wm, DEFAULT_WEIGHTS.coupling * DEFAULT_WEIGHTS.intra,
               DEFAULT_WEIGHTS.coupling * DEFAULT_WEIGHTS.inter][which]
    delta = total_loss(*scaled, DEFAULT_WEIGHTS) - total_loss(*parts, DEFAULT_WEIGHTS)
    assert delta == pytest.approx(weights * (k - 1) * parts[which], rel=1e-9, abs=1e-9)


def test_total_loss_rejects_nan():
    with pytest.raises(TrainingDiverged, match="L_inter"):
        total_loss(torch.tensor(1.0), 1.0, 1.0, float("nan"), DEFAULT_WEIGHTS)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(intra=-1.0)


# --------------------------------------------------------------------------- centroid updates

def test_centroid_update_fixed_point():
    state = _state([[2.0, -1.0]])
    update_centroids(state, torch.tensor([[1.0, -1.0], [3.0, -1.0]]), torch.tensor([0, 0]))
    assert state.centroids[0].tolist() == [2.0, -1.0]


def test_centroid_update_arithmetic():
    state = _state([[0.0]])
    update_centroids(state, torch.tensor([[10.0]]), torch.tensor([0]))
    assert state.centroids[0].item() == 1.0


def test_absent_classes_keep_centroids_bit_exact():
    state = _state(torch.randn(3, 4, generator=torch.Generator().manual_seed(0)))
    before = state.centroids.clone()
    update_centroids(state, torch.ones(2, 4), torch.tensor([1, 1]))
    assert torch.equal(state.centroids[[0, 2]], before[[0, 2]])
    assert not torch.equal(state.centroids[1], before[1])


def test_first_encounter_initializes_centroid():
    state = CouplingState(2, 2)
    update_centroids(state, torch.tensor([[2.0, 4.0], [4.0, 8.0]]), torch.tensor([1, 1]))
    assert state.initialized.tolist() == [False, True]
    assert state.centroids[1].tolist() == [3.0, 6.0]


# --------------------------------------------------------------------------- embedding

def _fixture(ratio2=0.1):
    data = make_synthetic_dataset(num_classes=6, per_class=40, size=8, seed=0)
    spec = WatermarkSpec((0, 1, 3, 4), 5, (1, 8, 8))
    pool = build_watermark_dataset(data, spec, 40, seed=1)
    holdout = build_watermark_dataset(make_synthetic_dataset(6, 40, 8, seed=1), spec, 50, seed=2)
    config = EmbeddingConfig(phase1_ratio=0.05, phase2_ratio=ratio2,
                             phase1=TrainingSchedule(epochs=3, batch_size=20, seed=1),
                             phase2=TrainingSchedule(epochs=3, batch_size=20, seed=2))
    init = build_model("naivenet", 6, (1, 8, 8), seed=1)
    return data, pool, holdout, config, init


def test_embedding_learns_watermark_and_logs(tmp_path):
    data, pool, holdout, config, init = _fixture()
    victim, history = embed_watermark(init, data, pool, config, holdout)
    assert watermark_success_rate(victim, holdout) >= 0.99
    assert [(r["phase"], r["epoch"]) for r in history] == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]
    path = write_training_log(history, tmp_path / "log.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == LOG_COLUMNS
    assert len(rows) == 6
    assert not parameters_equal(victim, init), "init must not be modified in place"


def test_embedding_is_deterministic():
    data, pool, holdout, config, init = _fixture()
    a, ha = embed_watermark(init, data, pool, config, holdout)
    b, hb = embed_watermark(init, data, pool, config, holdout)
    assert parameters_equal(a, b)
    assert ha == hb


def test_impossible_ratio_rejected():
    config = EmbeddingConfig(phase2_ratio=0.5, phase2=TrainingSchedule(batch_size=1))
    with pytest.raises(ValueError, match="no clean samples"):
        config.check()
    with pytest.raises(ValueError):
        EmbeddingConfig(phase1_ratio=0.0).check()


def test_mixed_target_labels_rejected():
    data, pool, _, config, init = _fixture()
    pool.labels[0] = 0
    with pytest.raises(ValueError, match="single target label"):
        embed_watermark(init, data, pool, config)


def test_uncoupled_embedding_still_trains():
    data, pool, holdout, config, init = _fixture()
    config.weights = LossWeights(coupling=0.0)
    victim, history = embed_watermark(init, data, pool, config, holdout)
    assert all(r["L_intra"] == 0.0 and r["L_inter"] == 0.0 for r in history)
    assert np.isfinite([r["L_pri"] for r in history]).all()
