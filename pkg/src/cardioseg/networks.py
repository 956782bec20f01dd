"""Dilated residual U-shape generator and conditional mask discriminator.

Generator: a downsampling tower and an upsampling tower of residual blocks
(two 3x3 convs with relu and an identity shortcut, 1x1 projection when the
width changes), stride-2 convs between encoder levels, nearest-neighbor 2x
upsampling followed by a 3x3 conv between decoder levels, and channel
concatenation skip connections. The dilation schedule grows toward the
deepest level. Default widths land the parameter count near 0.16M.

Discriminator: the image and the mask probabilities are concatenated into a
5-channel input, passed through residual blocks with 2x2 max-pooling,
global average pooling, and an affine head with a sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

CHECKPOINT_MAGIC = b"ASEG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 1
    num_classes: int = 4
    levels: int = 4
    widths: tuple[int, ...] = (16, 24, 32, 40)
    dilations: tuple[int, ...] = (1, 1, 2, 4)
    kernel_size: int = 3
    # builder rejects models outside this bound; None disables the check
    param_budget: tuple[int, int] | None = (100_000, 250_000)

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.widths) != self.levels or len(self.dilations) != self.levels:
            raise ConfigError(
                f"widths/dilations must have {self.levels} entries, got "
                f"{len(self.widths)}/{len(self.dilations)}")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_channels: int = 1
    mask_channels: int = 4
    widths: tuple[int, ...] = (16, 32, 64)

    @property
    def input_channels(self) -> int:
        return self.image_channels + self.mask_channels


@dataclass
class ModelParams:
    """Ordered named trainable tensors plus the identity of the architecture
    that produced them."""

    kind: str  # "generator" | "discriminator"
    config: GeneratorConfig | DiscriminatorConfig | None
    seed: int = 0
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.kind, self.config)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainables(self) -> list[Tensor]:
        return list(self.tensors.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


def _config_json(kind: str, config) -> str:
    payload = {"kind": kind, "config": asdict(config) if config else None}
    return json.dumps(payload, sort_keys=True)


def config_fingerprint(kind: str, config) -> str:
    return hashlib.sha256(_config_json(kind, config).encode()).hexdigest()


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for t in params.tensors.values())


# ---------------------------------------------------------------------------
# construction


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.tensors: dict[str, Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        limit = np.sqrt(6.0 / (cin * k * k))
        w = self.rng.uniform(-limit, limit, (cout, cin, k, k)).astype(np.float32)
        self.tensors[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.tensors[name + ".b"] = Tensor(np.zeros(cout, np.float32),
                                           requires_grad=True, name=name + ".b")

    def dense(self, name: str, fin: int, fout: int) -> None:
        limit = np.sqrt(6.0 / fin)
        w = self.rng.uniform(-limit, limit, (fin, fout)).astype(np.float32)
        self.tensors[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.tensors[name + ".b"] = Tensor(np.zeros(fout, np.float32),
                                           requires_grad=True, name=name + ".b")

    def resblock(self, name: str, cin: int, cout: int, k: int) -> None:
        self.conv(f"{name}.c1", cin, cout, k)
        self.conv(f"{name}.c2", cout, cout, k)
        if cin != cout:
            self.conv(f"{name}.sc", cin, cout, 1)


def build_generator(config: GeneratorConfig, seed: int) -> ModelParams:
    b = _Builder(seed)
    k = config.kernel_size
    ws = config.widths
    b.conv("stem", config.input_channels, ws[0], k)
    b.resblock("enc0", ws[0], ws[0], k)
    for lvl in range(1, config.levels):
        b.conv(f"down{lvl}", ws[lvl - 1], ws[lvl], k)
        b.resblock(f"enc{lvl}", ws[lvl], ws[lvl], k)
    for lvl in range(config.levels - 2, -1, -1):
        b.conv(f"up{lvl}", ws[lvl + 1], ws[lvl], k)
        b.resblock(f"dec{lvl}", 2 * ws[lvl], ws[lvl], k)
    b.conv("head", ws[0], config.num_classes, 1)

    params = ModelParams("generator", config, seed, b.tensors)
    if config.param_budget is not None:
        lo, hi = config.param_budget
        n = count_parameters(params)
        if not lo <= n <= hi:
            raise ConfigError(
                f"generator has {n} trainable parameters, outside [{lo}, {hi}]")
    return params


def build_discriminator(config: DiscriminatorConfig, seed: int) -> ModelParams:
    b = _Builder(seed)
    cin = config.input_channels
    for i, w in enumerate(config.widths):
        b.resblock(f"block{i}", cin, w, 3)
        cin = w
    b.dense("head", config.widths[-1], 1)
    return ModelParams("discriminator", config, seed, b.tensors)


# ---------------------------------------------------------------------------
# forward passes


def _conv(p: ModelParams, name: str, x: Tensor, stride=1, dilation=1,
          padding=0) -> Tensor:
    return ad.conv2d(x, p.tensors[name + ".w"], p.tensors[name + ".b"],
                     stride=stride, dilation=dilation, padding=padding)


def _resblock(p: ModelParams, name: str, x: Tensor, dilation: int, k: int) -> Tensor:
    pad = dilation * (k - 1) // 2
    h = ad.relu(_conv(p, f"{name}.c1", x, dilation=dilation, padding=pad))
    h = _conv(p, f"{name}.c2", h, dilation=dilation, padding=pad)
    sc = _conv(p, f"{name}.sc", x) if f"{name}.sc.w" in p.tensors else x
    return ad.relu(h + sc)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))


def generator_forward(params: ModelParams, images) -> Tensor:
    """Images (B, 1, H, W) -> per-class logits (B, num_classes, H, W)."""
    cfg: GeneratorConfig = params.config
    x = _as_tensor(images)
    if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected (B,{cfg.input_channels},H,W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    div = 2 ** (cfg.levels - 1)
    if h % div or w % div:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by {div}")

    k = cfg.kernel_size
    t = _conv(params, "stem", x, padding=(k - 1) // 2)
    t = _resblock(params, "enc0", t, cfg.dilations[0], k)
    skips = []
    for lvl in range(1, cfg.levels):
        skips.append(t)
        t = _conv(params, f"down{lvl}", t, stride=2, padding=(k - 1) // 2)
        t = _resblock(params, f"enc{lvl}", t, cfg.dilations[lvl], k)
    for lvl in range(cfg.levels - 2, -1, -1):
        t = ad.upsample2x_nearest(t)
        t = _conv(params, f"up{lvl}", t, padding=(k - 1) // 2)
        t = ad.concat_channels(t, skips[lvl])
        t = _resblock(params, f"dec{lvl}", t, cfg.dilations[lvl], k)
    return _conv(params, "head", t)


def discriminator_forward(params: ModelParams, images, mask_probs) -> Tensor:
    """(image, mask probabilities) -> probability the pair is real, (B, 1)."""
    cfg: DiscriminatorConfig = params.config
    img = _as_tensor(images)
    mask = _as_tensor(mask_probs)
    x = ad.concat_channels(img, mask)
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(
            f"discriminator input has {x.shape[1]} channels after concatenation, "
            f"expected {cfg.input_channels}")
    for i in range(len(cfg.widths)):
        x = _resblock(params, f"block{i}", x, 1, 3)
        x = ad.maxpool2d(x)
    pooled = ad.global_avg_pool(x)
    return ad.sigmoid(ad.dense(pooled, params.tensors["head.w"],
                               params.tensors["head.b"]))


# ---------------------------------------------------------------------------
# checkpoint io
#
# layout (all little-endian):
#   magic "ASEG" | u32 version | u32 len + fingerprint | u32 len + config json
#   | u32 tensor count | per tensor: u32 len + name | u32 ndim | u32 dims
#   | float32 data


def save_checkpoint(params: ModelParams, path) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    fp = params.fingerprint.encode()
    blob += struct.pack("<I", len(fp)) + fp
    cfg = _config_json(params.kind, params.config).encode()
    meta = json.dumps({"seed": params.seed}, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        nb = name.encode()
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ConfigError("truncated checkpoint file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def block(self) -> bytes:
        return self.take(self.u32())


def _config_from_json(payload: dict):
    kind = payload["kind"]
    raw = payload["config"]
    if kind == "generator":
        cfg = GeneratorConfig(
            input_channels=raw["input_channels"], num_classes=raw["num_classes"],
            levels=raw["levels"], widths=tuple(raw["widths"]),
            dilations=tuple(raw["dilations"]), kernel_size=raw["kernel_size"],
            param_budget=tuple(raw["param_budget"]) if raw["param_budget"] else None)
    elif kind == "discriminator":
        cfg = DiscriminatorConfig(
            image_channels=raw["image_channels"],
            mask_channels=raw["mask_channels"], widths=tuple(raw["widths"]))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return kind, cfg


def load_checkpoint(path, expected_fingerprint: str | None = None) -> ModelParams:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = r.block().decode()
    kind, cfg = _config_from_json(json.loads(r.block().decode()))
    meta = json.loads(r.block().decode())
    if config_fingerprint(kind, cfg) != fingerprint:
        raise ConfigError(f"{path}: fingerprint does not match embedded config")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise ConfigError(
            f"{path}: fingerprint {fingerprint[:12]}... does not match the "
            f"expected architecture {expected_fingerprint[:12]}...")
    tensors: dict[str, Tensor] = {}
    for _ in range(r.u32()):
        name = r.block().decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(kind, cfg, meta["seed"], tensors)
