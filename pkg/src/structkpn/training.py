"""Patch-based training loop with Adam, plus checkpoint serialization.

Each step samples random clean patches, corrupts them with the configured
noise, runs the model, and applies one Adam update. Per-pixel loss weights
come from the clean patch only. All randomness flows through one generator
seeded from the config; its state rides along in checkpoints, so resuming a
run reproduces the uninterrupted run bit for bit. Validation noise uses
stateless per-image seeds, making curve entries comparable across steps.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .gradstats import stats_map
from .kpn import KpnConfig, build_model, denoise_image, kpn_apply, params_to_tensors, plain_cnn_apply
from .losses import SsimConstants, l1_pixel, l2_pixel, loss_weights, struct_loss
from .metrics import psnr, ssim_image
from .tensor import Tensor, backward, reduce_mean

__all__ = [
    "NoiseModel",
    "add_noise",
    "TrainConfig",
    "AdamState",
    "init_adam",
    "adam_step",
    "build_plain_cnn",
    "split_train_val",
    "sample_patch_pairs",
    "TrainingDiverged",
    "train",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "write_curve_csv",
    "CURVE_HEADER",
]

CKPT_MAGIC = b"SKPN"
CKPT_VERSION = 1
CURVE_HEADER = "step,loss,val_psnr,val_ssim"

MODEL_KINDS = ("kpn", "plain-cnn")
LOSS_KINDS = ("l1", "l2", "struct")
NOISE_KINDS = ("gaussian", "poisson-gaussian")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    sigma: float = 0.1
    poisson_scale: float = 0.0   # expected counts per unit intensity

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.kind == "poisson-gaussian" and self.poisson_scale <= 0:
            raise ValueError("poisson-gaussian noise needs poisson_scale > 0")


def add_noise(img, nm, rng):
    """Corrupt a [0,1] image. sigma == 0 with gaussian kind is an exact copy.

    Poisson shot noise (when configured) scales intensities to expected
    counts, samples, and scales back; Gaussian read noise is then added and
    the result clipped to [0,1]. Draw order is fixed for reproducibility.
    """
    img = np.asarray(img, dtype=np.float64)
    out = img
    if nm.kind == "poisson-gaussian":
        counts = rng.poisson(np.clip(img, 0.0, None) * nm.poisson_scale)
        out = counts.astype(np.float64) / nm.poisson_scale
    if nm.sigma > 0:
        out = out + rng.normal(0.0, nm.sigma, img.shape)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "kpn"
    loss_kind: str = "struct"
    seed: int = 0
    steps: int = 1000
    batch_size: int = 4
    patch_size: int = 48
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_interval: int = 50
    kernel_size: int = 21
    stem_channels: int = 64
    num_res_blocks: int = 5
    groups: int = 2
    softmax_kernels: bool = False
    k_r: int = 11
    sigma_l2: float = 1.8
    sigma_l1: float = 0.35
    strength_normalization: str = "sqrt-over-kr"
    noise_kind: str = "gaussian"
    noise_sigma: float = 0.1
    poisson_scale: float = 0.0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k_r < 3 or self.k_r % 2 == 0:
            raise ValueError(f"k_r must be odd and >= 3, got {self.k_r}")
        # patches must fit one filter footprint plus the stats window
        if self.patch_size < self.kernel_size + self.k_r:
            raise ValueError(
                f"patch_size {self.patch_size} < kernel_size {self.kernel_size} "
                f"+ k_r {self.k_r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.val_interval < 0:
            raise ValueError(f"val_interval must be >= 0, got {self.val_interval}")
        self.kpn_config()
        self.noise_model()

    def kpn_config(self):
        return KpnConfig(kernel_size=self.kernel_size, stem_channels=self.stem_channels,
                         num_res_blocks=self.num_res_blocks, groups=self.groups,
                         softmax_normalize_kernels=self.softmax_kernels)

    def noise_model(self):
        return NoiseModel(kind=self.noise_kind, sigma=self.noise_sigma,
                          poisson_scale=self.poisson_scale)

    def loss_constants(self):
        return SsimConstants(window=self.k_r)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params):
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     t=0)


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns fresh (params, state).

    Parameters update in sorted-name order so numerics never depend on dict
    construction history.
    """
    if set(grads) != set(params):
        raise KeyError(
            f"adam_step: gradient keys differ from parameter keys: "
            f"missing {sorted(set(params) - set(grads))}, "
            f"extra {sorted(set(grads) - set(params))}")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new_p[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


def build_plain_cnn(cfg, seed):
    """Baseline: identical backbone, 1-channel head starting at zero.

    The zero head makes the initial network exactly the identity through the
    global skip connection.
    """
    return build_model(cfg, seed, head_channels=1, zero_head=True)


def split_train_val(items):
    """Hold out the last fifth (at least one item) when there are >= 2 items."""
    n = len(items)
    if n < 2:
        return list(items), []
    n_val = max(1, n // 5)
    return list(items[:-n_val]), list(items[-n_val:])


def sample_patch_pairs(images, cfg, rng, with_weights=True):
    """Draw one batch: (noisy (B,1,p,p), clean (B,1,p,p), per-patch weights).

    Weight maps come from the clean crop's gradient statistics; pass
    with_weights=False to skip them for plain L1/L2 training.
    """
    p = cfg.patch_size
    nm = cfg.noise_model()
    xs, ys, wts = [], [], []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        top = int(rng.integers(img.shape[0] - p + 1))
        left = int(rng.integers(img.shape[1] - p + 1))
        clean = np.ascontiguousarray(img[top:top + p, left:left + p])
        xs.append(add_noise(clean, nm, rng))
        ys.append(clean)
        if with_weights:
            stats = stats_map(clean, cfg.k_r, cfg.strength_normalization)
            wts.append(loss_weights(stats, cfg.sigma_l2, cfg.sigma_l1))
    return np.stack(xs)[:, None], np.stack(ys)[:, None], wts


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the 1-based step where it happened."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def _validate(params, model_cfg, cfg, val_imgs):
    nm = cfg.noise_model()
    ps, ss = [], []
    for i, img in enumerate(val_imgs):
        noisy = add_noise(img, nm, np.random.default_rng([cfg.seed, 91, i]))
        den = denoise_image(params, model_cfg, noisy, cfg.model_kind)
        ps.append(psnr(img, den))
        ss.append(ssim_image(img, den))
    return float(np.mean(ps)), float(np.mean(ss))


def train(cfg, images, start=None):
    """Run (or resume) training; returns (final Checkpoint, loss curve rows).

    Curve rows are (step, loss, val_psnr, val_ssim) with None in the val slots
    on steps where validation did not run. Raises TrainingDiverged as soon as
    the loss goes non-finite. Resuming from a checkpoint keeps that run's
    config (only the step target is taken from cfg) and is bit-identical to
    never having stopped.
    """
    if start is not None:
        cfg = replace(start.config, steps=cfg.steps)
    model_cfg = cfg.kpn_config()
    imgs = [np.asarray(im, dtype=np.float64) for im in images]
    if not imgs:
        raise ValueError("train: no images given")
    for i, im in enumerate(imgs):
        if im.ndim != 2 or min(im.shape) < cfg.patch_size:
            raise ValueError(
                f"train: image {i} has shape {im.shape}, needs at least "
                f"{cfg.patch_size}x{cfg.patch_size}")
    train_imgs, val_imgs = split_train_val(imgs)

    if start is None:
        if cfg.model_kind == "kpn":
            params = build_model(model_cfg, cfg.seed)
        else:
            params = build_plain_cnn(model_cfg, cfg.seed)
        state = init_adam(params)
        rng = np.random.default_rng(cfg.seed)
        step0 = 0
    else:
        params = {k: p.copy() for k, p in start.params.items()}
        state = AdamState(m={k: a.copy() for k, a in start.adam_m.items()},
                          v={k: a.copy() for k, a in start.adam_v.items()},
                          t=start.step)
        rng = np.random.default_rng()
        rng.bit_generator.state = start.rng_state
        step0 = start.step

    consts = cfg.loss_constants()
    need_weights = cfg.loss_kind == "struct"
    curve = []
    for step in range(step0 + 1, cfg.steps + 1):
        xb, yb, wts = sample_patch_pairs(train_imgs, cfg, rng, with_weights=need_weights)
        tensors = params_to_tensors(params)
        x_t = Tensor(xb)
        if cfg.model_kind == "kpn":
            _, yhat = kpn_apply(tensors, x_t, model_cfg)
        else:
            yhat = plain_cnn_apply(tensors, x_t, model_cfg)
        if cfg.loss_kind == "l1":
            loss = reduce_mean(l1_pixel(yhat, Tensor(yb)))
        elif cfg.loss_kind == "l2":
            loss = reduce_mean(l2_pixel(yhat, Tensor(yb)))
        else:
            loss = struct_loss(yhat, yb, wts, consts)
        loss_val = float(loss.item())
        if not math.isfinite(loss_val):
            raise TrainingDiverged(step, loss_val)
        grad_by_tensor = backward(loss, list(tensors.values()))
        grads = {name: grad_by_tensor[t] for name, t in tensors.items()}
        params, state = adam_step(params, grads, state,
                                  cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        val_psnr = val_ssim = None
        if val_imgs and cfg.val_interval > 0 and (
                step % cfg.val_interval == 0 or step == cfg.steps):
            val_psnr, val_ssim = _validate(params, model_cfg, cfg, val_imgs)
        curve.append((step, loss_val, val_psnr, val_ssim))

    ckpt = Checkpoint(config=cfg, step=max(cfg.steps, step0), params=params,
                      adam_m=state.m, adam_v=state.v,
                      rng_state=rng.bit_generator.state)
    return ckpt, curve


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    params: dict
    adam_m: dict
    adam_v: dict
    rng_state: dict


def _write_named(f, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def _read_named(f):
    head = f.read(4)
    if not head:
        return None
    nlen, = struct.unpack("<I", head)
    name = f.read(nlen).decode("utf-8")
    rank, = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = f.read(8 * n)
    if len(raw) != 8 * n:
        raise ValueError(f"checkpoint: truncated tensor {name!r}")
    return name, np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def save_checkpoint(path, ckpt):
    """Write magic, version, JSON metadata, then named tensors (sorted).

    Saving the result of load_checkpoint reproduces the file byte for byte.
    """
    meta = {"config": asdict(ckpt.config), "step": int(ckpt.step),
            "rng_state": ckpt.rng_state}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for prefix, group in (("param.", ckpt.params),
                              ("adam.m.", ckpt.adam_m),
                              ("adam.v.", ckpt.adam_v)):
            for name in sorted(group):
                _write_named(f, prefix + name, group[name])
    return path


def load_checkpoint(path):
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        blob_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blob_len).decode("utf-8"))
        groups = {"param.": {}, "adam.m.": {}, "adam.v.": {}}
        while True:
            item = _read_named(f)
            if item is None:
                break
            name, arr = item
            for prefix in groups:
                if name.startswith(prefix):
                    groups[prefix][name[len(prefix):]] = arr
                    break
            else:
                raise ValueError(f"{path}: unknown tensor section {name!r}")

    cfg_dict = meta.get("config", {})
    known = {f.name for f in fields(TrainConfig)}
    extra = sorted(set(cfg_dict) - known)
    missing = sorted(known - set(cfg_dict))
    if extra or missing:
        raise ValueError(
            f"{path}: config keys mismatch: unknown {extra}, missing {missing}")
    cfg = TrainConfig(**cfg_dict)
    params = groups["param."]
    if set(groups["adam.m."]) != set(params) or set(groups["adam.v."]) != set(params):
        raise ValueError(f"{path}: optimizer tensors do not match parameters")
    return Checkpoint(config=cfg, step=int(meta["step"]), params=params,
                      adam_m=groups["adam.m."], adam_v=groups["adam.v."],
                      rng_state=meta["rng_state"])


def write_curve_csv(path, rows):
    """Loss curve as CSV; val columns are empty on steps without validation."""
    lines = [CURVE_HEADER]
    for step, loss, vp, vs in rows:
        cell_p = "" if vp is None else repr(float(vp))
        cell_s = "" if vs is None else repr(float(vs))
        lines.append(f"{step},{float(loss)!r},{cell_p},{cell_s}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return Path(path)
