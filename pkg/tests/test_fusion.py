import numpy as np
import pytest

from hyda import numerics as nm
from hyda.errors import ConfigError, ShapeError
from hyda.fusion import (FusionParams, KernelGenerator, dynamic_fuse, fuse_all, generate_kernels,
                         generator_weight_count, merge_enhance, residual_enhance)

from conftest import naive_conv3d


def T(a, grad=False):
    return nm.Tensor(a, requires_grad=grad)


def generator(rng, C, c_hid, c_out, scale=1.0, grad=False):
    return KernelGenerator(T(scale * rng.uniform(-1, 1, (c_hid, C // 27)), grad),
                           T(scale * rng.uniform(-1, 1, c_hid), grad),
                           T(scale * rng.uniform(-1, 1, (c_out, 1)), grad),
                           T(scale * rng.uniform(-1, 1, c_out), grad))


def fusion(rng, c_hid, c_out, c_res, grad=False):
    u = lambda *s: T(rng.uniform(-1, 1, s), grad)  # noqa: E731
    return FusionParams(u(c_hid, 2 * c_out), u(c_hid), u(c_res, c_hid), u(c_res), u(c_res, c_hid), u(c_res))


def oracle_kernels(f, g):
    """Per-subject loop version of the generator (no reshapes of the whole batch)."""
    out = []
    for row in f:
        x = row.reshape(-1, 27)  # [C/27, 27 taps]
        h = g.conv1_w.data @ x + g.conv1_b.data[:, None]  # [C_hid, 27]
        k = g.conv2_w.data[:, :1, None] * h[None] + g.conv2_b.data[:, None, None]  # [C_out, C_hid, 27]
        out.append(k.reshape(k.shape[0], k.shape[1], 3, 3, 3))
    return np.stack(out)


def test_generator_shapes_and_counts():
    assert generator_weight_count(864, 384, 128) == 12_416
    assert generator_weight_count(54, 16, 8) == 40
    with pytest.raises(ConfigError):
        generator_weight_count(50, 16, 8)
    rng = np.random.default_rng(0)
    g = generator(rng, 54, 16, 8)
    assert g.weight_count == 40
    assert generate_kernels(T(rng.standard_normal((1, 54))), g).shape == (1, 8, 16, 3, 3, 3)
    with pytest.raises(ConfigError):
        generate_kernels(T(np.zeros((1, 50))), g)


def test_full_size_kernel_shape():
    rng = np.random.default_rng(1)
    g = generator(rng, 864, 384, 128, scale=0.01)
    assert generate_kernels(T(rng.standard_normal((1, 864, 1, 1, 1))), g).shape == (1, 128, 384, 3, 3, 3)


def test_generator_matches_oracle_and_zero():
    rng = np.random.default_rng(2)
    g = generator(rng, 81, 4, 3)
    f = rng.standard_normal((2, 81))
    np.testing.assert_allclose(generate_kernels(T(f), g).data, oracle_kernels(f, g), atol=1e-12, rtol=0)
    z = KernelGenerator(T(np.zeros((4, 3))), T(np.zeros(4)), T(np.zeros((3, 1))), T(np.zeros(3)))
    assert not generate_kernels(T(f), z).data.any()


def test_dynamic_fuse_examples():
    rng = np.random.default_rng(3)
    F = rng.standard_normal((1, 1, 3, 3, 3))
    assert not dynamic_fuse(T(np.zeros((1, 2, 1, 3, 3, 3))), T(F)).data.any()
    dirac = np.zeros((1, 1, 3, 3, 3))
    dirac[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(dynamic_fuse(T(dirac), T(F)).data, np.maximum(F, 0))
    W = rng.standard_normal((2, 3, 2, 3, 3, 3))
    F = rng.standard_normal((2, 2, 4, 4, 4))
    np.testing.assert_allclose(dynamic_fuse(T(W), T(F)).data, np.maximum(naive_conv3d(F, W), 0),
                               atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        dynamic_fuse(T(W), T(rng.standard_normal((2, 3, 4, 4, 4))))


def test_merge_enhance_examples():
    rng = np.random.default_rng(4)
    o1, o2 = T(rng.uniform(0, 1, (1, 8, 4, 4, 4))), T(rng.uniform(0, 1, (1, 8, 4, 4, 4)))
    fp = fusion(rng, 16, 8, 2)
    out = merge_enhance(o1, o2, fp)
    assert out.shape == (1, 2, 4, 4, 4) and nm.flatten(out).shape == (1, 128)
    fp.conv5_w.data[...] = 0
    fp.conv5_b.data[...] = 0
    assert not merge_enhance(o1, o2, fp).data.any()
    fp = fusion(rng, 16, 8, 2)
    fp.conv4_w.data[...] = 0
    fp.conv4_b.data[...] = 50.0
    merged = np.concatenate([o1.data, o2.data], axis=1)
    O = np.einsum("oi,bidhw->bodhw", fp.conv3_w.data, merged) + fp.conv3_b.data[None, :, None, None, None]
    body = np.maximum(np.einsum("oi,bidhw->bodhw", fp.conv5_w.data, O) + fp.conv5_b.data[None, :, None, None, None], 0)
    np.testing.assert_allclose(merge_enhance(o1, o2, fp).data, body, atol=1e-6)
    with pytest.raises(ShapeError):
        merge_enhance(o1, T(np.zeros((1, 8, 4, 4, 2))), fp)


def test_gate_in_open_interval():
    rng = np.random.default_rng(5)
    fp = fusion(rng, 4, 2, 3)
    o = T(rng.uniform(0, 1, (1, 2, 2, 2, 2)))
    merged = nm.pointwise_conv3d(nm.concat([o, o], axis=1), fp.conv3_w, fp.conv3_b)
    gate = nm.sigmoid(nm.pointwise_conv3d(nm.global_avg_pool(merged), fp.conv4_w, fp.conv4_b)).data
    assert np.all((gate > 0) & (gate < 1))


def test_residual_examples():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(16)
    np.testing.assert_array_equal(residual_enhance(T(x), T(np.zeros((1, 2, 2, 2, 2)))).data[0], x)
    o = rng.standard_normal((1, 2, 2, 2, 2))
    np.testing.assert_array_equal(residual_enhance(T(np.zeros(16)), T(o)).data[0], o.reshape(-1))
    o2 = rng.standard_normal((1, 2, 2, 2, 2))
    lhs = residual_enhance(T(x), T(o + o2)).data[0]
    np.testing.assert_allclose(lhs, x + o.reshape(-1) + o2.reshape(-1), atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        residual_enhance(T(np.zeros(15)), T(o))


def _fuse_setup(rng, grad=False):
    B, C, c_hid, c_out = 2, 54, 4, 3
    D = 2
    f1 = T(rng.uniform(-1, 1, (B, C)), grad)
    f2 = T(rng.uniform(-1, 1, (B, C)), grad)
    emb = {"mri": T(rng.uniform(0, 1, (B, 2 * D ** 3)), grad), "clinical": T(rng.uniform(0, 1, (B, 5)), grad)}
    maps = {"mri": T(rng.uniform(-1, 1, (B, c_hid, D, D, D)), grad)}
    return f1, f2, emb, maps, generator(rng, C, c_hid, c_out, grad=grad), \
        generator(rng, C, c_hid, c_out, grad=grad), fusion(rng, c_hid, c_out, 2, grad=grad)


def test_fuse_all_passthrough_and_zero():
    rng = np.random.default_rng(7)
    f1, f2, emb, maps, g1, g2, fp = _fuse_setup(rng)
    out = fuse_all(f1, f2, emb, maps, g1, g2, fp)
    assert out["clinical"] is emb["clinical"]
    for g in (g1, g2):
        for t in (g.conv1_w, g.conv1_b, g.conv2_w, g.conv2_b):
            t.data[...] = 0
    fp.conv5_w.data[...] = 0
    fp.conv5_b.data[...] = 0
    out = fuse_all(f1, f2, emb, maps, g1, g2, fp)
    np.testing.assert_array_equal(out["mri"].data, emb["mri"].data)


def test_subject_conditioning():
    rng = np.random.default_rng(8)
    f1, f2, emb, maps, g1, g2, fp = _fuse_setup(rng)
    maps["mri"].data[1] = maps["mri"].data[0]
    emb["mri"].data[1] = emb["mri"].data[0]
    out = fuse_all(f1, f2, emb, maps, g1, g2, fp)["mri"].data
    assert not np.allclose(out[0], out[1])


def test_fusion_path_gradients():
    rng = np.random.default_rng(9)
    f1, f2, emb, maps, g1, g2, fp = _fuse_setup(rng, grad=True)
    params = [("f1", f1), ("f2", f2), ("emb", emb["mri"]), ("map", maps["mri"])]
    params += [(f"g1.{k}", v) for k, v in vars(g1).items()] + [(f"g2.{k}", v) for k, v in vars(g2).items()]
    params += [(f"fp.{k}", v) for k, v in vars(fp).items()]
    c = rng.standard_normal((2, 16))

    def loss():
        out = fuse_all(f1, f2, emb, maps, g1, g2, fp)
        return nm.reduce_sum(nm.mul(out["mri"], c))

    assert nm.finite_diff_check(loss, params, hold_relu_pattern=True) < 1e-4
