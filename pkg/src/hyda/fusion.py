"""Subject-conditioned dynamic convolution over imaging feature maps.

Hypergraph embeddings are turned into per-subject 3x3x3 kernel banks by a small
generator, convolved with each imaging modality's feature map, merged across
the two taps, gated channel-wise and added back onto the modality embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError


@dataclass
class KernelGenerator:
    conv1_w: nm.Tensor  # [C_hid, C/27]
    conv1_b: nm.Tensor  # [C_hid]
    conv2_w: nm.Tensor  # [C_out, 1]
    conv2_b: nm.Tensor  # [C_out]

    @property
    def weight_count(self):
        return self.conv1_w.size + self.conv2_w.size


@dataclass
class FusionParams:
    conv3_w: nm.Tensor  # [C_hid, 2*C_out]
    conv3_b: nm.Tensor
    conv4_w: nm.Tensor  # [C_res, C_hid]
    conv4_b: nm.Tensor
    conv5_w: nm.Tensor  # [C_res, C_hid]
    conv5_b: nm.Tensor


def generator_weight_count(C: int, C_hid: int, C_out: int) -> int:
    """Stored weights (biases excluded) of one kernel generator."""
    if C % 27:
        raise ConfigError(f"C={C} must be divisible by 27")
    return (C // 27) * C_hid + C_out


def generate_kernels(f_tap: nm.Tensor, gen: KernelGenerator) -> nm.Tensor:
    """[B, C] (or [B, C, 1, 1, 1]) tap features -> kernels [B, C_out, C_hid, 3, 3, 3]."""
    B = f_tap.shape[0]
    C = int(np.prod(f_tap.shape[1:]))
    if C % 27:
        raise ConfigError(f"tap width C={C} must be divisible by 27")
    c_hid, c_out = gen.conv1_w.shape[0], gen.conv2_w.shape[0]
    h = nm.reshape(f_tap, (B, C // 27, 3, 3, 3))
    h = nm.pointwise_conv3d(h, gen.conv1_w, gen.conv1_b)  # [B, C_hid, 3,3,3]
    h = nm.reshape(h, (B * c_hid, 1, 3, 3, 3))  # swap: hidden channels become the batch
    h = nm.pointwise_conv3d(h, gen.conv2_w, gen.conv2_b)  # [B*C_hid, C_out, 3,3,3]
    h = nm.reshape(h, (B, c_hid, c_out, 3, 3, 3))
    return nm.transpose(h, (0, 2, 1, 3, 4, 5))


def dynamic_fuse(kernels: nm.Tensor, fmap: nm.Tensor) -> nm.Tensor:
    """ReLU of each subject's map convolved with its own kernel bank."""
    if kernels.data.ndim == 5:
        kernels = nm.reshape(kernels, (1,) + kernels.shape)
    if kernels.shape[0] != fmap.shape[0] or kernels.shape[2] != fmap.shape[1]:
        raise ShapeError(f"kernels {kernels.shape} do not match feature map {fmap.shape}")
    return nm.relu(nm.conv3d_same(fmap, kernels))


def merge_enhance(o1: nm.Tensor, o2: nm.Tensor, fp: FusionParams) -> nm.Tensor:
    if o1.shape != o2.shape:
        raise ShapeError(f"tap outputs differ in shape: {o1.shape} vs {o2.shape}")
    merged = nm.pointwise_conv3d(nm.concat([o1, o2], axis=1), fp.conv3_w, fp.conv3_b)
    gate = nm.sigmoid(nm.pointwise_conv3d(nm.global_avg_pool(merged), fp.conv4_w, fp.conv4_b))
    body = nm.relu(nm.pointwise_conv3d(merged, fp.conv5_w, fp.conv5_b))
    return nm.mul(gate, body)


def residual_enhance(x: nm.Tensor, o_hat: nm.Tensor) -> nm.Tensor:
    x = nm.as_tensor(x)
    if x.data.ndim == 1:
        x = nm.reshape(x, (1, x.shape[0]))
    flat = nm.flatten(o_hat)
    if flat.shape != x.shape:
        raise ShapeError(f"flattened fusion output {flat.shape} does not match embedding {x.shape}")
    return nm.add(x, flat)


def fuse_all(f1: nm.Tensor, f2: nm.Tensor, embeddings: dict, maps: dict,
             gen1: KernelGenerator, gen2: KernelGenerator, fp: FusionParams) -> dict:
    """Enhanced embedding for every modality; modalities without a feature map pass through."""
    w1 = generate_kernels(f1, gen1)
    w2 = generate_kernels(f2, gen2)
    out = {}
    for name, x in embeddings.items():
        fmap = maps.get(name)
        if fmap is None:
            out[name] = x
            continue
        o_hat = merge_enhance(dynamic_fuse(w1, fmap), dynamic_fuse(w2, fmap), fp)
        out[name] = residual_enhance(x, o_hat)
    return out
