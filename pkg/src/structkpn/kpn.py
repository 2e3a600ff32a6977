"""Kernel-predicting denoiser: a small CNN emits one k x k filter per pixel.

The backbone is a 3x3 stem, a chain of residual blocks (3x3 conv, relu,
3x3 conv, skip add; the last block uses 2 convolution groups), a relu, and a
1x1 head with k^2 output channels. Each pixel's k^2 channel slice is applied
to the input frame by ``local_conv``, which replicates edges so output size
equals input size. Kernels can optionally be softmax-normalized per pixel so
they are positive and sum to one.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, accumulate_grad, add, conv2d, make_op,
                     register_op, registered_ops, relu, softmax_vec)

__all__ = [
    "KpnConfig",
    "local_conv",
    "build_model",
    "kpn_apply",
    "plain_cnn_apply",
    "kpn_forward",
    "kernel_at",
    "denoise_image",
    "params_to_tensors",
    "expected_param_shapes",
]


@dataclass(frozen=True)
class KpnConfig:
    kernel_size: int = 21
    stem_channels: int = 64
    num_res_blocks: int = 5
    groups: int = 2
    softmax_normalize_kernels: bool = False

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.num_res_blocks < 0:
            raise ValueError(f"num_res_blocks must be >= 0, got {self.num_res_blocks}")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.stem_channels % self.groups != 0:
            raise ValueError(
                f"stem_channels {self.stem_channels} not divisible by groups {self.groups}")


def _filter_geometry(k2):
    k = math.isqrt(k2)
    if k * k != k2 or k % 2 == 0:
        raise ShapeError(f"local_conv: {k2} filter channels is not an odd square")
    return k, k // 2


def local_conv(x, v):
    """Apply per-pixel filters: out[m,n] = sum_{s,t} x[m-s, n-t] * v[(s+r)k+(t+r)].

    x is (N,1,H,W), v is (N,k^2,H,W) with k odd; out-of-range taps replicate
    the nearest edge pixel, so the output is (N,1,H,W). The accumulation runs
    in fixed channel order, making results bit-reproducible.
    """
    xd, vd = x.data, v.data
    if xd.ndim != 4 or xd.shape[1] != 1:
        raise ShapeError(f"local_conv: input must be (N,1,H,W), got {xd.shape}")
    if vd.ndim != 4:
        raise ShapeError(f"local_conv: filters must be (N,k^2,H,W), got {vd.shape}")
    if vd.shape[0] != xd.shape[0] or vd.shape[2:] != xd.shape[2:]:
        raise ShapeError(
            f"local_conv: filter field {vd.shape} does not match input {xd.shape} "
            "on batch/spatial axes")
    k, r = _filter_geometry(vd.shape[1])
    n, _, h, w = xd.shape

    row_idx = {s: np.clip(np.arange(h) - s, 0, h - 1) for s in range(-r, r + 1)}
    col_idx = {t: np.clip(np.arange(w) - t, 0, w - 1) for t in range(-r, r + 1)}

    out = np.zeros((n, 1, h, w))
    c = 0
    for s in range(-r, r + 1):
        xs = xd[:, :, row_idx[s], :]
        for t in range(-r, r + 1):
            out += xs[:, :, :, col_idx[t]] * vd[:, c:c + 1]
            c += 1

    def bw(g):
        if v.requires_grad:
            gv = np.empty_like(vd)
            ci = 0
            for s in range(-r, r + 1):
                xs_ = xd[:, 0, row_idx[s], :]
                for t in range(-r, r + 1):
                    gv[:, ci] = g[:, 0] * xs_[:, :, col_idx[t]]
                    ci += 1
            accumulate_grad(v, gv)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            bi = np.arange(n)[:, None, None]
            ci = 0
            for s in range(-r, r + 1):
                rg = row_idx[s][None, :, None]
                for t in range(-r, r + 1):
                    cg = col_idx[t][None, None, :]
                    np.add.at(gx[:, 0], (bi, rg, cg), g[:, 0] * vd[:, ci])
                    ci += 1
            accumulate_grad(x, gx)

    return make_op(out, (x, v), bw, "local_conv")


if "local_conv" not in registered_ops():
    register_op("local_conv")


def expected_param_shapes(cfg, head_channels=None):
    """Parameter name -> (shape, conv groups) for a config; defines init order."""
    if head_channels is None:
        head_channels = cfg.kernel_size * cfg.kernel_size
    c = cfg.stem_channels
    shapes = {"stem.w": ((c, 1, 3, 3), 1), "stem.b": ((c,), 1)}
    for i in range(cfg.num_res_blocks):
        g = cfg.groups if i == cfg.num_res_blocks - 1 else 1
        shapes[f"res{i}.conv1.w"] = ((c, c // g, 3, 3), g)
        shapes[f"res{i}.conv1.b"] = ((c,), g)
        shapes[f"res{i}.conv2.w"] = ((c, c // g, 3, 3), g)
        shapes[f"res{i}.conv2.b"] = ((c,), g)
    shapes["head.w"] = ((head_channels, c, 1, 1), 1)
    shapes["head.b"] = ((head_channels,), 1)
    return shapes


def build_model(cfg, seed, head_channels=None, zero_head=False):
    """He-initialized parameter arrays (biases zero) keyed by layer name.

    Weights are drawn in a fixed layer order from a PCG64 generator, so the
    same (cfg, seed) always yields bit-identical parameters. ``zero_head``
    makes the final 1x1 layer start as the zero map.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, groups) in expected_param_shapes(cfg, head_channels).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif zero_head and name == "head.w":
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    return params


def params_to_tensors(params, requires_grad=True):
    return {name: Tensor(arr, requires_grad=requires_grad, name=name)
            for name, arr in params.items()}


def _check_params(params, cfg, head_channels):
    expected = expected_param_shapes(cfg, head_channels)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, (shape, _) in expected.items():
        got = params[name].data.shape
        if got != shape:
            raise ValueError(f"parameter {name} has shape {got}, expected {shape}")
    return expected


def _backbone(params, x, cfg):
    h = conv2d(x, params["stem.w"], params["stem.b"])
    for i in range(cfg.num_res_blocks):
        g = cfg.groups if i == cfg.num_res_blocks - 1 else 1
        a = relu(conv2d(h, params[f"res{i}.conv1.w"], params[f"res{i}.conv1.b"], groups=g))
        b = conv2d(a, params[f"res{i}.conv2.w"], params[f"res{i}.conv2.b"], groups=g)
        h = add(h, b)
    return relu(h)


def kpn_apply(params, x, cfg):
    """Graph forward pass: (per-pixel filter field, filtered image).

    params maps layer names to Tensors; x is an (N,1,H,W) Tensor. The filter
    field has k^2 channels, softmax-normalized per pixel when configured.
    """
    k2 = cfg.kernel_size * cfg.kernel_size
    _check_params(params, cfg, k2)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ShapeError(f"kpn_apply: input must be (N,1,H,W), got {x.data.shape}")
    feats = _backbone(params, x, cfg)
    v = conv2d(feats, params["head.w"], params["head.b"])
    if cfg.softmax_normalize_kernels:
        v = softmax_vec(v, axis=1)
    return v, local_conv(x, v)


def plain_cnn_apply(params, x, cfg):
    """Baseline forward pass: same backbone, 1-channel head, global skip.

    The head starts at zero in the baseline builder, so the initial network is
    the identity; output is input plus the predicted residual.
    """
    _check_params(params, cfg, 1)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ShapeError(f"plain_cnn_apply: input must be (N,1,H,W), got {x.data.shape}")
    feats = _backbone(params, x, cfg)
    res = conv2d(feats, params["head.w"], params["head.b"])
    return add(x, res)


def kpn_forward(img, params, cfg):
    """Run the filter-predicting model on one (H,W) array.

    Returns (field, denoised): field is (H,W,k^2) with channel c holding the
    filter tap at offset (s,t) = (c // k - r, c % k - r), denoised is (H,W).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"kpn_forward: expected a 2-D image, got shape {img.shape}")
    x = Tensor(img[None, None])
    tensors = params_to_tensors(params, requires_grad=False)
    v, yhat = kpn_apply(tensors, x, cfg)
    return v.data[0].transpose(1, 2, 0).copy(), yhat.data[0, 0].copy()


def kernel_at(field, m, n):
    """Extract the (k,k) filter at pixel (m,n) from an (H,W,k^2) field."""
    h, w, k2 = field.shape
    if not (0 <= m < h and 0 <= n < w):
        raise ValueError(f"kernel_at: pixel ({m}, {n}) outside {h}x{w} field")
    k, _ = _filter_geometry(k2)
    return field[m, n].reshape(k, k).copy()


def denoise_image(params, cfg, img, model_kind="kpn"):
    """Denoise one (H,W) array with either model flavor; returns (H,W)."""
    if model_kind == "kpn":
        return kpn_forward(img, params, cfg)[1]
    if model_kind == "plain-cnn":
        img = np.asarray(img, dtype=np.float64)
        x = Tensor(img[None, None])
        tensors = params_to_tensors(params, requires_grad=False)
        return plain_cnn_apply(tensors, x, cfg).data[0, 0].copy()
    raise ValueError(f"unknown model kind {model_kind!r}")
