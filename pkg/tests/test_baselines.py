import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from norank.baselines import (
    TsneConfig,
    conditional_probabilities,
    joint_probabilities,
    kl_divergence,
    pca_fit_transform,
    student_t_affinities,
    tsne_embed,
)
from norank.data import generate_blobs


def test_pca_collinear():
    t = np.linspace(-1, 1, 10)
    x = np.column_stack([t, 2 * t + 3])
    model, y = pca_fit_transform(x, 1)
    assert model.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(model.inverse_transform(y), x, atol=1e-12)


def test_pca_centered_mean_and_full_rank():
    x = np.random.default_rng(0).normal(size=(20, 5))
    model, y = pca_fit_transform(x - x.mean(axis=0), 5)
    assert np.allclose(model.mean, 0.0, atol=1e-14)
    model, y = pca_fit_transform(x, 5)
    assert np.abs(model.mean + y @ model.components.T - x).max() <= 1e-8
    comps = model.components
    assert np.linalg.norm(comps.T @ comps - np.eye(5)) <= 1e-10
    ratio = model.explained_variance_ratio
    assert np.all(np.diff(ratio) <= 1e-15) and ratio.sum() <= 1 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_pca_translation_invariant_up_to_sign(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
    _, y1 = pca_fit_transform(x, 2)
    _, y2 = pca_fit_transform(x + rng.normal(size=4) * 10, 2)
    for c in range(2):
        assert min(np.abs(y1[:, c] - y2[:, c]).max(), np.abs(y1[:, c] + y2[:, c]).max()) <= 1e-8


def test_pca_rejects_bad_rank():
    with pytest.raises(ValueError):
        pca_fit_transform(np.zeros((3, 5)), 4)
    with pytest.raises(ValueError):
        pca_fit_transform(np.zeros((3, 5)), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(2.0, 8.0))
def test_conditional_rows_sum_to_one_and_match_perplexity(seed, perplexity):
    x = np.random.default_rng(seed).normal(size=(30, 3))
    p = conditional_probabilities(x, perplexity)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-10
    assert not np.diag(p).any()
    rows = np.where(p > 0, p, 1.0)
    entropy = -np.sum(p * np.log(rows), axis=1)
    assert np.abs(np.exp(entropy) - perplexity).max() <= 1e-4


def test_joint_and_student_t_normalized():
    rng = np.random.default_rng(1)
    p = joint_probabilities(rng.normal(size=(25, 4)), 5.0)
    assert np.allclose(p, p.T) and abs(p.sum() - 1.0) <= 1e-10
    q = student_t_affinities(rng.normal(size=(25, 2)))
    assert abs(q.sum() - 1.0) <= 1e-10 and not np.diag(q).any()


def test_kl_identity():
    q = student_t_affinities(np.random.default_rng(2).normal(size=(10, 2)))
    assert kl_divergence(q, q) == pytest.approx(0.0, abs=1e-15)


def test_tsne_separates_two_far_blobs():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) + 50.0])
    labels = np.repeat([0, 1], 4)
    res = tsne_embed(x, TsneConfig(perplexity=2.0, iterations=300, seed=0))
    assert all(v >= 0 for v in res.kl_trace)
    # some 1-D threshold along some axis splits the blobs
    separable = False
    for axis in range(2):
        coord = res.embedding[:, axis]
        for cut in np.sort(coord):
            side = coord <= cut
            if np.array_equal(side, labels == 0) or np.array_equal(side, labels == 1):
                separable = True
    assert separable


def test_tsne_kl_trace_on_blobs():
    ds = generate_blobs(80, 10, 2, seed=0)
    res = tsne_embed(ds.x, TsneConfig(perplexity=20.0, iterations=500, seed=0))
    trace = np.asarray(res.kl_trace)
    assert np.all(np.isfinite(trace)) and np.all(trace >= 0)
    for start in range(0, trace.size - 50):
        assert trace[start + 50] < trace[start]
    again = tsne_embed(ds.x, TsneConfig(perplexity=20.0, iterations=500, seed=0))
    assert np.array_equal(res.embedding, again.embedding)


def test_tsne_config_validation():
    x = np.zeros((10, 2))
    with pytest.raises(ValueError):
        tsne_embed(x, TsneConfig(perplexity=5.0))
    with pytest.raises(ValueError):
        tsne_embed(np.zeros((5, 2)), TsneConfig(perplexity=1.2))
    with pytest.raises(ValueError):
        TsneConfig(iterations=0).validate(100)
