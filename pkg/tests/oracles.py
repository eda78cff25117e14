"""Slow reference implementations used as test oracles."""

import numpy as np


def conv_oracle(x, w, b=None):
    """Direct loop-nest 3-D convolution with zero 'same' padding."""
    B, Cin, D, H, W = x.shape
    Cout, _, kd, kh, kw = w.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((B, Cout, D, H, W))
    for b_ in range(B):
        for o in range(Cout):
            for d in range(D):
                for h in range(H):
                    for ww in range(W):
                        patch = xp[b_, :, d:d + kd, h:h + kh, ww:ww + kw]
                        out[b_, o, d, h, ww] = (patch * w[o]).sum() + (0.0 if b is None else b[o])
    return out


def boundary_oracle(mask):
    """Foreground voxels with a six-neighbour that is background or outside, by explicit loops."""
    m = np.asarray(mask, bool)
    pts = []
    D, H, W = m.shape
    for d, h, w in zip(*np.nonzero(m)):
        for dd, dh, dw in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            z, y, x = d + dd, h + dh, w + dw
            if not (0 <= z < D and 0 <= y < H and 0 <= x < W) or not m[z, y, x]:
                pts.append((d, h, w))
                break
    return np.array(pts, dtype=np.int64).reshape(-1, 3)


def hd95_oracle(a, b, spacing=(1.0, 1.0, 1.0)):
    """All-pairs O(n^2) HD95 over six-connected boundary voxels."""
    if not np.any(a) or not np.any(b):
        return None
    sp = np.asarray(spacing, float)
    pa, pb = boundary_oracle(a) * sp, boundary_oracle(b) * sp
    dist = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max(np.percentile(dist.min(axis=1), 95), np.percentile(dist.min(axis=0), 95)))
