import numpy as np
import pytest

from winnet.lifting import (
    CoarseDetail, PUNetParams, ResidualBlock, block_spectral_norm,
    cayley_frame, cayley_matrix, dct_frame, dct_matrix, linn_forward,
    linn_inverse, merge, punet_apply, split,
)
from winnet.linalg import Tensor, backward, tsum
from winnet.model import ModelConfig
from winnet.train import init_model
from helpers import check_grad, materialize_operator, numeric_grad


def frame_rows(frame):
    return frame.split_kernel.data.reshape(frame.c, frame.p * frame.p)


def rand_scale(seed, **kw):
    defaults = dict(K=1, p=4, c=16, h=1, M=2, J=2, width=8, q=3,
                    lista_atoms=8)
    defaults.update(kw)
    model = init_model(ModelConfig(**defaults), seed=seed)
    return model.scales[0].linn


def test_dct_first_filter_is_constant():
    fr = dct_frame(2)
    assert np.allclose(fr.split_kernel.data[0, 0], 0.5)


def test_dct_frame_orthonormal():
    for p in (2, 3, 4):
        F = dct_matrix(p)
        assert np.max(np.abs(F.T @ F - np.eye(p * p))) < 1e-10


def test_dct_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        dct_frame(4, c=12)


def test_constant_image_interior_details_vanish():
    fr = dct_frame(4, dtype=np.float64)
    img = Tensor(np.full((1, 16, 16), 7.0))
    cd = split(img, fr)
    interior = cd.detail.data[:, 3:-3, 3:-3]
    assert np.max(np.abs(interior)) < 1e-12
    # zero-padded analysis cannot keep boundary details at zero, but the
    # coarse/detail pair still reconstructs the constant exactly
    rec = merge(cd, fr)
    assert np.max(np.abs(rec.data - 7.0)) < 1e-10


def test_split_merge_identity_float64():
    rng = np.random.default_rng(0)
    fr = dct_frame(4, dtype=np.float64)
    for shape in [(1, 16, 16), (1, 11, 13), (1, 4, 4), (2, 1, 9, 8)]:
        y = Tensor(rng.normal(size=shape) * 100)
        rec = merge(split(y, fr), fr)
        assert np.max(np.abs(rec.data - y.data)) < 1e-10


def test_split_merge_identity_float32():
    rng = np.random.default_rng(1)
    fr = dct_frame(4)
    y = Tensor((rng.normal(size=(1, 40, 40)) * 50 + 128).astype(np.float32))
    rec = merge(split(y, fr), fr)
    assert np.max(np.abs(rec.data - y.data)) < 1e-3  # values are O(255)


def test_split_homogeneous():
    rng = np.random.default_rng(2)
    fr = dct_frame(4, dtype=np.float64)
    y = rng.normal(size=(1, 12, 12))
    a = split(Tensor(3.5 * y), fr)
    b = split(Tensor(y), fr)
    assert np.allclose(a.coarse.data, 3.5 * b.coarse.data)
    assert np.allclose(a.detail.data, 3.5 * b.detail.data)


def test_merge_zeros_and_channel_mismatch():
    fr = dct_frame(4)
    z = CoarseDetail(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((15, 8, 8))))
    assert np.all(merge(z, fr).data == 0)
    bad = CoarseDetail(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((14, 8, 8))))
    with pytest.raises(ValueError):
        merge(bad, fr)


def test_cayley_zero_theta_is_identity():
    K = cayley_matrix(Tensor(np.zeros((4, 4))))
    assert np.allclose(K.data, np.eye(4), atol=1e-12)


def test_cayley_2x2_rotation():
    K = cayley_matrix(Tensor(np.array([[0.0, 1.0], [0.0, 0.0]])))
    assert np.allclose(K.data, [[0.0, -1.0], [1.0, 0.0]], atol=1e-12)


def test_cayley_orthogonal_and_frame_condition():
    rng = np.random.default_rng(3)
    for _ in range(10):
        theta = rng.normal(size=(9, 9))
        K = cayley_matrix(Tensor(theta)).data
        assert np.max(np.abs(K.T @ K - np.eye(9))) < 1e-10
        fr = cayley_frame(Tensor(theta), p=2)
        F = frame_rows(fr)
        assert np.max(np.abs(F.T @ F - np.eye(4))) < 1e-10


def test_cayley_requires_enough_channels():
    with pytest.raises(ValueError):
        cayley_frame(Tensor(np.zeros((3, 3))), p=2)


def test_cayley_frame_differentiable():
    rng = np.random.default_rng(4)
    theta0 = rng.normal(size=(4, 4)) * 0.3
    y = rng.normal(size=(1, 6, 6))

    def f_t(t):
        fr = cayley_frame(t, p=2)
        cd = split(Tensor(y), fr)
        return tsum(cd.detail ** 2)

    def f_f(a):
        fr = cayley_frame(Tensor(a), p=2)
        cd = split(Tensor(y), fr)
        return float((cd.detail.data ** 2).sum())

    rel, _, _ = check_grad(f_t, f_f, theta0)
    assert rel < 1e-6


def test_cayley_split_merge_identity():
    rng = np.random.default_rng(5)
    theta = rng.normal(size=(6, 6))
    fr = cayley_frame(Tensor(theta.astype(np.float64)), p=2)
    y = Tensor(rng.normal(size=(1, 9, 9)))
    rec = merge(split(y, fr), fr)
    assert np.max(np.abs(rec.data - y.data)) < 1e-10


# -- PUNets ------------------------------------------------------------------

def zero_punet(in_ch, out_ch, width=4, q=3, dilation=1, dtype=np.float64):
    z = lambda *s: Tensor(np.zeros(s, dtype=dtype), requires_grad=True)
    block = ResidualBlock(z(width, 1, q, q), z(width, width, 1, 1), z(width),
                          z(width, 1, q, q), z(width, width, 1, 1))
    return PUNetParams(input_conv=z(width, in_ch, 3, 3), input_thresholds=z(width),
                       blocks=[block], output_conv=z(out_ch, width, 3, 3),
                       dilation=dilation, channels=width, q=q)


def identity_punet(dilation=1, dtype=np.float64):
    """1->1 channel net computing the identity at threshold scale zero."""
    net = zero_punet(1, 1, width=2, q=3, dilation=dilation, dtype=dtype)
    net.input_conv.data[0, 0, 1, 1] = 1.0   # route input into channel 0
    net.output_conv.data[0, 0, 1, 1] = 1.0  # and back out
    net.input_thresholds.data[:] = -40.0    # softplus ~ 4e-18
    net.blocks[0].thresholds.data[:] = -40.0
    return net


def test_punet_zero_weights_zero_output():
    rng = np.random.default_rng(6)
    net = zero_punet(3, 2)
    out = punet_apply(net, Tensor(rng.normal(size=(3, 7, 7))), 1.0)
    assert np.all(out.data == 0)


def test_punet_huge_scale_zeroes_output():
    model = init_model(ModelConfig(K=1, M=1, J=1, width=8, q=3, lista_atoms=8), seed=0)
    net = model.scales[0].linn.predict[0]
    x = Tensor(np.random.default_rng(7).normal(size=(1, 9, 9)).astype(np.float32))
    out = punet_apply(net, x, 1e9)
    assert np.all(out.data == 0)


def test_punet_linear_path_matches_materialization():
    net = identity_punet()
    # make the block branch a nontrivial linear map
    rng = np.random.default_rng(8)
    net.blocks[0].depthwise1.data[:] = rng.normal(size=net.blocks[0].depthwise1.shape)
    net.blocks[0].pointwise1.data[:] = rng.normal(size=(2, 2, 1, 1))
    net.blocks[0].depthwise2.data[:] = rng.normal(size=net.blocks[0].depthwise2.shape)
    net.blocks[0].pointwise2.data[:] = rng.normal(size=(2, 2, 1, 1))

    apply = lambda u: punet_apply(net, u, 0.0)
    A = materialize_operator(apply, (1, 8, 8))
    x = rng.normal(size=(1, 8, 8))
    assert np.allclose(apply(Tensor(x)).data.ravel(), A @ x.ravel(), atol=1e-10)


def test_punet_dilation_grows_receptive_field():
    rng = np.random.default_rng(9)

    def support_radius(dilation):
        net = zero_punet(1, 1, width=3, q=3, dilation=dilation)
        for t in (net.input_conv, net.output_conv, net.blocks[0].depthwise1,
                  net.blocks[0].pointwise1, net.blocks[0].depthwise2,
                  net.blocks[0].pointwise2):
            t.data[:] = rng.normal(size=t.shape)
        net.input_thresholds.data[:] = -40.0
        net.blocks[0].thresholds.data[:] = -40.0
        impulse = np.zeros((1, 41, 41))
        impulse[0, 20, 20] = 1.0
        out = punet_apply(net, Tensor(impulse), 0.0).data[0]
        ys, xs = np.nonzero(np.abs(out) > 1e-12)
        return max(np.abs(ys - 20).max(), np.abs(xs - 20).max())

    r1 = support_radius(1)
    r2 = support_radius(2)
    assert r2 == 2 * r1


def test_linn_all_zero_nets_identity():
    linn = rand_scale(0)
    for net in linn.predict + linn.update:
        for t in net.parameters():
            t.data[:] = 0
    rng = np.random.default_rng(10)
    cd = CoarseDetail(Tensor(rng.normal(size=(1, 8, 8)).astype(np.float32)),
                      Tensor(rng.normal(size=(15, 8, 8)).astype(np.float32)))
    out = linn_forward(cd, linn, 1.0)
    assert np.allclose(out.coarse.data, cd.coarse.data)
    assert np.allclose(out.detail.data, cd.detail.data)


def test_linn_toy_scalar_example():
    from winnet.lifting import LinnParams
    P = identity_punet()
    U = identity_punet()
    linn = LinnParams(frame=dct_frame(2), predict=[P], update=[U])
    c0 = Tensor(np.full((1, 5, 5), 1.0))
    d0 = Tensor(np.full((1, 5, 5), 2.0))
    fwd = linn_forward(CoarseDetail(c0, d0), linn, 0.0)
    assert np.allclose(fwd.detail.data, 1.0, atol=1e-12)
    assert np.allclose(fwd.coarse.data, 2.0, atol=1e-12)
    inv = linn_inverse(fwd, linn, 0.0)
    assert np.allclose(inv.coarse.data, 1.0, atol=1e-12)
    assert np.allclose(inv.detail.data, 2.0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_roundtrip_random_params_float32(seed):
    linn = rand_scale(seed)
    rng = np.random.default_rng(seed + 100)
    y = Tensor((rng.normal(size=(1, 24, 24)) * 40 + 120).astype(np.float32))
    cd = split(y, linn.frame)
    back = linn_inverse(linn_forward(cd, linn, 1.0), linn, 1.0)
    rec = merge(back, linn.frame)
    assert np.max(np.abs(rec.data - y.data)) < 1e-3


def test_end_to_end_reconstruction_float64():
    linn = rand_scale(3)
    for t in linn.parameters():
        t.data = t.data.astype(np.float64)
    linn.frame = dct_frame(4, dtype=np.float64)
    rng = np.random.default_rng(11)
    y = Tensor(rng.normal(size=(1, 20, 20)) * 100)
    rec = merge(linn_inverse(linn_forward(split(y, linn.frame), linn, 1.0), linn, 1.0),
                linn.frame)
    assert np.max(np.abs(rec.data - y.data)) < 1e-10


def test_block_spectral_norm_zero_and_scaling():
    width = 3
    z = lambda *s: Tensor(np.zeros(s))
    blk = ResidualBlock(z(width, 1, 1, 1), z(width, width, 1, 1), z(width),
                        z(width, 1, 1, 1), z(width, width, 1, 1))
    assert block_spectral_norm(blk, (6, 6), iters=5).item() == 0.0
    # identity depthwise taps, pointwise1 = 3I, pointwise2 = I: branch = 3x identity
    blk.depthwise1.data[:, 0, 0, 0] = 1.0
    blk.depthwise2.data[:, 0, 0, 0] = 1.0
    blk.pointwise1.data[:] = 3.0 * np.eye(width)[:, :, None, None]
    blk.pointwise2.data[:] = np.eye(width)[:, :, None, None]
    val = block_spectral_norm(blk, (6, 6), iters=20).item()
    assert abs(val - 3.0) < 1e-10


def test_block_spectral_norm_matches_dense():
    model = init_model(ModelConfig(K=1, M=1, J=1, width=4, q=3, lista_atoms=8), seed=5)
    blk = model.scales[0].linn.predict[0].blocks[0]
    for t in (blk.depthwise1, blk.pointwise1, blk.depthwise2, blk.pointwise2):
        t.data = t.data.astype(np.float64)
    from winnet.lifting import block_operator
    op = block_operator(blk, (8, 8))
    A = materialize_operator(op.apply, (4, 8, 8))
    dense = np.linalg.svd(A, compute_uv=False)[0]
    est = block_spectral_norm(blk, (8, 8), iters=4000, seed=1).item()
    assert est <= dense + 1e-4
    assert abs(est - dense) < 1e-4
