import numpy as np
import pytest

from hyda.cohort import SynthSpec, synth_cohort


def naive_pointwise(x, w, b=None):
    B, Ci, D, H, W = x.shape
    out = np.zeros((B, w.shape[0], D, H, W))
    for n in range(B):
        for o in range(w.shape[0]):
            for i in range(Ci):
                out[n, o] += w[o, i] * x[n, i]
            if b is not None:
                out[n, o] += b[o]
    return out


def naive_conv3d(x, w):
    """Six nested loops (plus batch/channels); zero padding 1, cross-correlation."""
    B, Ci, D, H, W = x.shape
    Co = w.shape[-5]
    out = np.zeros((B, Co, D, H, W))
    for n in range(B):
        k = w[n] if w.ndim == 6 else w
        for o in range(Co):
            for d in range(D):
                for h in range(H):
                    for ww in range(W):
                        acc = 0.0
                        for i in range(Ci):
                            for a in range(3):
                                for bb in range(3):
                                    for c in range(3):
                                        dd, hh, cc = d + a - 1, h + bb - 1, ww + c - 1
                                        if 0 <= dd < D and 0 <= hh < H and 0 <= cc < W:
                                            acc += k[o, i, a, bb, c] * x[n, i, dd, hh, cc]
                        out[n, o, d, h, ww] = acc
    return out


def dense_hgconv(H, X, W, b):
    dv = H.sum(axis=1)
    de = H.sum(axis=0)
    return np.diag(1 / dv) @ H @ np.diag(1 / de) @ H.T @ X @ W + b


@pytest.fixture(scope="session")
def small_cohort():
    spec = SynthSpec(N=40, M_imaging=2, has_tabular=True, E_m=64, map_dims=(4, 4, 4, 4), K=2,
                     imbalance_ratio=3.0, complementarity=0.5, noise_sigma=0.1)
    return synth_cohort(spec, seed=3)
