"""Structure-aware composite loss: per-pixel L1/L2/SSIM blended by gradient stats.

Each pixel gets sum-to-one weights (gamma1, gamma2, gamma3) from a softmax of
[coherence*sigma_l2, sigma_l1, strength], so strong coherent edges lean on L2,
fine high-strength structure on SSIM, and flat regions on L1. The total loss
averages (weighted term + plain L1)/2 over all pixels. Weights are computed
from the clean image only and are constants during backprop; gradients flow to
the denoised image through the L1/L2 terms and a windowed per-pixel SSIM map.
"""

from dataclasses import dataclass

import numpy as np

from .gradstats import GradStatsMap
from .tensor import Tensor, ShapeError, abs_val, add, conv2d, div, mul, reduce_mean, reduce_sum, sub

__all__ = [
    "SsimConstants",
    "LossWeights",
    "l1_pixel",
    "l2_pixel",
    "ssim_patch",
    "loss_weights",
    "weighted_pixel_loss",
    "struct_loss",
]


@dataclass(frozen=True)
class SsimConstants:
    """SSIM stabilizers and window; defaults assume [0,1] data (L = 1)."""

    c1: float = 1e-4          # (0.01 * L)^2
    c2: float = 9e-4          # (0.03 * L)^2
    window: int = 11
    kind: str = "uniform"     # "uniform" | "gaussian"
    gaussian_sigma: float = 1.5

    @classmethod
    def from_range(cls, data_range=1.0, window=11, kind="uniform", gaussian_sigma=1.5):
        return cls(c1=(0.01 * data_range) ** 2, c2=(0.03 * data_range) ** 2,
                   window=window, kind=kind, gaussian_sigma=gaussian_sigma)


def window_vector(k, kind="uniform", gaussian_sigma=1.5):
    """Normalized 1-D window; the 2-D window is its outer product."""
    if kind == "uniform":
        return np.full(k, 1.0 / k)
    if kind == "gaussian":
        x = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * gaussian_sigma ** 2))
        return g / g.sum()
    raise ValueError(f"unknown SSIM window kind {kind!r}")


def window_weights(shape, kind="uniform", gaussian_sigma=1.5):
    gr = window_vector(shape[0], kind, gaussian_sigma)
    gc = window_vector(shape[1], kind, gaussian_sigma)
    return np.outer(gr, gc)


@dataclass
class LossWeights:
    """Per-pixel sum-to-one blend weights (L2, L1, SSIM)."""

    gamma1: np.ndarray   # L2 weight
    gamma2: np.ndarray   # L1 weight
    gamma3: np.ndarray   # SSIM weight
    sigma_l2: float
    sigma_l1: float


def _as_like(y, ref):
    """Lift a target (Tensor, array, or scalar) to a Tensor shaped like ref."""
    if isinstance(y, Tensor):
        return y
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(ref.data.shape, float(arr))
    return Tensor(arr)


def l1_pixel(yhat, y):
    """|yhat - y| per element; subgradient 0 at equality."""
    if isinstance(yhat, Tensor):
        return abs_val(sub(yhat, _as_like(y, yhat)))
    return np.abs(np.asarray(yhat, dtype=np.float64) - y)


def l2_pixel(yhat, y):
    """(yhat - y)^2 per element."""
    if isinstance(yhat, Tensor):
        d = sub(yhat, _as_like(y, yhat))
        return mul(d, d)
    d = np.asarray(yhat, dtype=np.float64) - y
    return d * d


def ssim_patch(p, q, consts=SsimConstants()):
    """Single-window SSIM of two equally-shaped patches, in (-1, 1].

    Window statistics use the (uniform by default) normalized window over the
    whole patch. Tensor input gives a differentiable scalar Tensor; plain
    arrays give a float.
    """
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        pt = p if isinstance(p, Tensor) else Tensor(p)
        qt = q if isinstance(q, Tensor) else Tensor(q)
        if pt.data.shape != qt.data.shape:
            raise ShapeError(f"ssim_patch: patch shapes {pt.data.shape} != {qt.data.shape}")
        w = Tensor(window_weights(pt.data.shape[-2:], consts.kind, consts.gaussian_sigma)
                   .reshape(pt.data.shape))
        mp = reduce_sum(mul(pt, w))
        mq = reduce_sum(mul(qt, w))
        sp = sub(reduce_sum(mul(mul(pt, pt), w)), mul(mp, mp))
        sq = sub(reduce_sum(mul(mul(qt, qt), w)), mul(mq, mq))
        spq = sub(reduce_sum(mul(mul(pt, qt), w)), mul(mp, mq))
        num = mul(add(mul(mul(mp, mq), 2.0), consts.c1), add(mul(spq, 2.0), consts.c2))
        den = mul(add(add(mul(mp, mp), mul(mq, mq)), consts.c1),
                  add(add(sp, sq), consts.c2))
        return div(num, den)

    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"ssim_patch: patch shapes {p.shape} != {q.shape}")
    w = window_weights(p.shape[-2:], consts.kind, consts.gaussian_sigma).reshape(p.shape)
    mp = np.sum(p * w)
    mq = np.sum(q * w)
    sp = np.sum(p * p * w) - mp * mp
    sq = np.sum(q * q * w) - mq * mq
    spq = np.sum(p * q * w) - mp * mq
    num = (2.0 * mp * mq + consts.c1) * (2.0 * spq + consts.c2)
    den = (mp * mp + mq * mq + consts.c1) * (sp + sq + consts.c2)
    return float(num / den)


def loss_weights(stats: GradStatsMap, sigma_l2=1.8, sigma_l1=0.35):
    """Per-pixel softmax of [mu*sigma_l2, sigma_l1, strength] -> (g1, g2, g3).

    Depends only on ground-truth statistics; the maps are constants w.r.t.
    the denoised image during backprop.
    """
    z = np.stack([stats.coherence * sigma_l2,
                  np.full_like(stats.strength, sigma_l1),
                  stats.strength], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    g = e / e.sum(axis=-1, keepdims=True)
    return LossWeights(gamma1=g[..., 0], gamma2=g[..., 1], gamma3=g[..., 2],
                       sigma_l2=sigma_l2, sigma_l1=sigma_l1)


def weighted_pixel_loss(yhat_patch, y_patch, yhat_center, y_center, gammas,
                        consts=SsimConstants()):
    """Blended loss value at one pixel: g1*L2 + g2*L1 - g3*SSIM(patches).

    ``gammas`` is the (g1, g2, g3) triple for this pixel; the SSIM term is
    negated because similarity is maximized. Reference/oracle path on plain
    values.
    """
    g1, g2, g3 = gammas
    return (g1 * float(l2_pixel(yhat_center, y_center))
            + g2 * float(l1_pixel(yhat_center, y_center))
            - g3 * ssim_patch(yhat_patch, y_patch, consts))


def _as_weight_stack(weights, n, h, w):
    if isinstance(weights, LossWeights):
        weights = [weights] * n if n > 1 else [weights]
    if len(weights) != n:
        raise ShapeError(f"struct_loss: {len(weights)} weight maps for batch of {n}")
    maps = []
    for gname in ("gamma1", "gamma2", "gamma3"):
        m = np.stack([getattr(wt, gname) for wt in weights])[:, None, :, :]
        if m.shape != (n, 1, h, w):
            raise ShapeError(f"struct_loss: weight map shape {m.shape[2:]} != image {h}x{w}")
        maps.append(m)
    return maps


def _box(t, row_k, col_k, zero_b):
    return conv2d(conv2d(t, row_k, zero_b), col_k, zero_b)


def struct_loss(yhat, y, weights, consts=SsimConstants()):
    """Structure-aware loss over an (N,1,H,W) batch; differentiable w.r.t. yhat.

    Per pixel: (g1*L2 + g2*L1 - g3*SSIM + L1) / 2, averaged over every pixel.
    The SSIM term is the per-pixel windowed map with edge-replicated borders;
    ``weights`` is one LossWeights (or one per batch item) precomputed from y.
    """
    if not isinstance(yhat, Tensor):
        yhat = Tensor(yhat)
    ydata = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if yhat.data.ndim != 4 or yhat.data.shape[1] != 1:
        raise ShapeError(f"struct_loss: expected (N,1,H,W), got {yhat.data.shape}")
    if ydata.shape != yhat.data.shape:
        raise ShapeError(
            f"struct_loss: prediction {yhat.data.shape} vs target {ydata.shape}")
    n, _, h, w = yhat.data.shape
    g1m, g2m, g3m = _as_weight_stack(weights, n, h, w)

    k = consts.window
    vec = window_vector(k, consts.kind, consts.gaussian_sigma)
    row_k = Tensor(vec.reshape(1, 1, 1, k))
    col_k = Tensor(vec.reshape(1, 1, k, 1))
    zero_b = Tensor(np.zeros(1))

    yt = Tensor(ydata)
    mp = _box(yhat, row_k, col_k, zero_b)
    mq = _box(yt, row_k, col_k, zero_b)
    sp = sub(_box(mul(yhat, yhat), row_k, col_k, zero_b), mul(mp, mp))
    sq = sub(_box(mul(yt, yt), row_k, col_k, zero_b), mul(mq, mq))
    spq = sub(_box(mul(yhat, yt), row_k, col_k, zero_b), mul(mp, mq))
    num = mul(add(mul(mul(mp, mq), 2.0), consts.c1), add(mul(spq, 2.0), consts.c2))
    den = mul(add(add(mul(mp, mp), mul(mq, mq)), consts.c1),
              add(add(sp, sq), consts.c2))
    ssim_map = div(num, den)

    diff = sub(yhat, yt)
    l1_map = abs_val(diff)
    l2_map = mul(diff, diff)
    blended = sub(add(mul(Tensor(g1m), l2_map), mul(Tensor(g2m), l1_map)),
                  mul(Tensor(g3m), ssim_map))
    return mul(reduce_mean(add(blended, l1_map)), 0.5)
