from __future__ import annotations

import numpy as np
import pytest

from preaa import autodiff as ad
from preaa.backbone import FlopCounter
from preaa.gradcheck import check_gradients
from preaa.restoration import (
    RestorationParams, idw_matrix, restore_dense, restore_frames, restore_variant,
)
from preaa.router import select_keep

D, DOUT = 6, 5


def params(seed=0, dim=8, heads=2):
    p = RestorationParams.init(D, DOUT, dim, heads, seed)
    # the output projection starts at zero; give it values so every path carries signal
    p.tensors["o.w"].data = np.random.default_rng(seed + 99).normal(0, 0.5, p.tensors["o.w"].shape)
    p.tensors["o.b"].data = np.random.default_rng(seed + 98).normal(0, 0.1, p.tensors["o.b"].shape)
    return p


def frame(rng, P=12, r=0.4):
    F = rng.normal(size=(P, D))
    keep = select_keep(rng.random((1, P)), r)[0]
    G = rng.normal(size=(keep.size, DOUT))
    return F, keep, G


def test_untrained_restorer_emits_zeros(rng):
    p = RestorationParams.init(D, DOUT, 8, 2, 0)
    F, keep, G = frame(rng)
    assert np.all(restore_dense(F, F[keep], G, p).data == 0)


def test_dim_must_divide_by_heads():
    with pytest.raises(ValueError):
        RestorationParams.init(D, DOUT, 10, 4)


def test_projection_parameter_count():
    p = RestorationParams.init(D, DOUT, 8, 2)
    assert p.parameter_count() == 2 * D * 8 + 2 * DOUT * 8 + 3 * 8 + DOUT


@pytest.mark.parametrize("r", [0.05, 0.1, 0.25, 0.4, 0.5, 0.9, 1.0])
def test_output_shape_independent_of_ratio(rng, r):
    F, keep, G = frame(rng, P=20, r=r)
    assert restore_dense(F, F[keep], G, params(), keep=keep).shape == (20, DOUT)


def test_single_keep_token_copies_projected_value(rng):
    p = params()
    F, _, _ = frame(rng)
    keep = np.array([5])
    G = rng.normal(size=(1, DOUT))
    out, weights = restore_frames(F[None], F[keep][None], G[None], p, return_weights=True)
    t = {k: v.data for k, v in p.tensors.items()}
    expected = (G @ t["v.w"] + t["v.b"]) @ t["o.w"] + t["o.b"]
    np.testing.assert_allclose(out.data[0], np.repeat(expected, 12, axis=0), rtol=0, atol=1e-9)
    assert np.all(weights == 1.0)


def test_tied_projections_attend_to_own_row(rng):
    for seed in range(5):
        p = params(seed, dim=16, heads=1)
        # orthonormal columns and unit-norm rows: self cosine 1 beats every other pair
        W = np.linalg.qr(rng.normal(size=(16, D)))[0].T
        p.tensors["q.w"].data = W
        p.tensors["k.w"].data = W.copy()
        F = rng.normal(size=(10, D))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        _, w = restore_frames(F[None], F[None], rng.normal(size=(1, 10, DOUT)), p, return_weights=True)
        np.testing.assert_array_equal(np.argmax(w[0, 0], axis=-1), np.arange(10))


def test_misaligned_keep_features_error(rng):
    F, keep, G = frame(rng)
    with pytest.raises(ValueError):
        restore_dense(F, F[keep][::-1], G, params(), keep=keep[::-1])
    with pytest.raises(ValueError):
        restore_dense(F, F[keep] + 1, G, params(), keep=keep)
    with pytest.raises(ValueError):
        restore_frames(F[None], F[keep][None], G[None, :-1], params())


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = params(seed)
    F, keep, G = frame(rng)
    Gt = ad.Tensor(G, requires_grad=True)
    target = rng.normal(size=(12, DOUT))

    def loss():
        out = restore_dense(F, F[keep], Gt, p)
        d = out - target
        return ad.mean(d * d)

    report = check_gradients(loss, {**p.tensors, "G": Gt})
    assert report.passed, str(report)


def test_flops_linear_in_frames_and_proportional_to_grid(rng):
    p = params()

    def count(N, P, K):
        fl = FlopCounter()
        restore_frames(rng.normal(size=(N, P, D)), rng.normal(size=(N, K, D)), rng.normal(size=(N, K, DOUT)), p, fl)
        return fl

    base = count(1, 16, 4)
    assert base["restore_attn"] == 4 * 16 * 4 * 8
    assert count(5, 16, 4)["restore_attn"] == 5 * base["restore_attn"]
    assert count(5, 16, 4).total == 5 * base.total
    assert count(1, 32, 4)["restore_attn"] == 2 * base["restore_attn"]
    assert count(1, 16, 8)["restore_attn"] == 2 * base["restore_attn"]


def test_frames_restore_independently(rng):
    p = params()
    N, P, K = 4, 10, 4
    F = rng.normal(size=(N, P, D))
    keep = select_keep(rng.random((N, P)), 0.4)
    G = rng.normal(size=(N, K, DOUT))
    batch = restore_variant("cross-attn", F, keep, G, p).data
    perm = rng.permutation(N)
    shuffled = restore_variant("cross-attn", F[perm], keep[perm], G[perm], p).data
    np.testing.assert_array_equal(shuffled, batch[perm])
    for f in range(N):
        one = restore_dense(F[f], F[f, keep[f]], G[f], p, keep=keep[f]).data
        np.testing.assert_allclose(one, batch[f], rtol=0, atol=1e-14)


def test_zero_fill_places_outputs(rng):
    F = rng.normal(size=(1, 6, D))
    keep = np.array([[1, 4]])
    G = rng.normal(size=(1, 2, DOUT))
    out = restore_variant("zero-fill", F, keep, G).data[0]
    np.testing.assert_array_equal(out[[1, 4]], G[0])
    assert np.all(out[[0, 2, 3, 5]] == 0)


def test_every_variant_is_identity_when_all_kept(rng):
    F = rng.normal(size=(2, 6, D))
    keep = np.tile(np.arange(6), (2, 1))
    G = rng.normal(size=(2, 6, DOUT))
    for mode in ("zero-fill", "bilinear", "cross-attn"):
        np.testing.assert_array_equal(restore_variant(mode, F, keep, G, params(), (2, 3)).data, G)


def test_bilinear_single_source_is_constant(rng):
    F = rng.normal(size=(1, 12, D))
    G = rng.normal(size=(1, 1, DOUT))
    out = restore_variant("bilinear", F, np.array([[7]]), G, grid=(3, 4)).data[0]
    np.testing.assert_allclose(out, np.repeat(G[0], 12, axis=0), rtol=0, atol=1e-15)


def test_idw_weights(rng):
    W = idw_matrix(np.array([0, 3]), (1, 4))
    np.testing.assert_allclose(W.sum(axis=1), 1.0)
    np.testing.assert_array_equal(W[0], [1, 0])
    np.testing.assert_array_equal(W[3], [0, 1])
    np.testing.assert_allclose(W[1], [2 / 3, 1 / 3])
    keep = np.sort(rng.choice(20, 6, replace=False))
    W = idw_matrix(keep, (4, 5))
    assert ((W > 0).sum(axis=1) <= 4).all()
    np.testing.assert_allclose(W.sum(axis=1), 1.0)


def test_variant_errors(rng):
    F = rng.normal(size=(1, 6, D))
    keep = np.array([[0, 2]])
    G = rng.normal(size=(1, 2, DOUT))
    with pytest.raises(ValueError):
        restore_variant("nearest", F, keep, G)
    with pytest.raises(ValueError):
        restore_variant("bilinear", F, keep, G, grid=(2, 2))
    with pytest.raises(ValueError):
        restore_variant("cross-attn", F, keep, G)


def test_state_dict_round_trip():
    a, b = params(0), params(1)
    b.load_state_dict(a.state_dict())
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k].data, b.tensors[k].data)
