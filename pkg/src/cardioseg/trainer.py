"""Training orchestration: supervised generator pretraining followed by
alternating adversarial updates of the discriminator and generator.

A shared iteration counter drives both phases, read literally from the
training procedure: pretraining runs while i < pretrain_iters (j), the
adversarial phase continues while i < total_iters (k), so the adversarial
phase executes k - j iterations and k <= j degenerates to the pure
segmentation baseline. Each adversarial iteration takes one discriminator
ascent step with the generator frozen, then one generator descent step with
the discriminator frozen, on consecutive mini-batches.

Everything random is derived from (seed, counter) streams, so a run is a
pure function of its config and data, and resuming from a state file
continues bit-identically.

The four ablation arms are pure config: U+D (k = 0, lam = 1),
U+D+T (k = 0, lam = 0.9), U+A+D (k > 0, lam = 1), U+A+D+T (k > 0,
lam = 0.9). With lam = 1 the transfer set is not assembled at all, so
pseudo pairs also disappear from the discriminator objective.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, no_grad, zero_grads
from .data import (
    PREDICTED, BatchPlan, DatasetManifest, MaskVolume, TrainSample, Volume,
    augment, crop_rois, load_manifest, zscore_normalize,
)
from .errors import ConfigError, DataError, NumericalError
from .losses import (
    EXPERT, PSEUDO, LossWeights, cross_entropy, dice_loss, loss_D, loss_DT,
    loss_G, loss_ID,
)
from .networks import (
    DiscriminatorConfig, GeneratorConfig, ModelParams, build_discriminator,
    build_generator, discriminator_forward, generator_forward,
    load_checkpoint, save_checkpoint,
)
from .optim import AdamState, adam_step
from .transfer import assemble_transfer_set

PRETRAIN = "PRETRAIN"
ADVERSARIAL = "ADVERSARIAL"

STATE_MAGIC = b"ASTG"
STATE_VERSION = 1

LOG_COLUMNS = ("iteration", "L_ce", "L_Dice", "L_ID", "L_DT", "L_G", "L_D",
               "L_adv")

OVERLAY_COLORS = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}
OVERLAY_ALPHA = 0.4


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.9
    lr: float = 2e-4
    decay: float = 1e-8
    batch_size: int = 16
    pretrain_iters: int = 300  # j
    total_iters: int = 900  # k: adversarial phase runs from j up to k
    seed: int = 0
    non_saturating_g: bool = False
    include_t_in_d_real: bool = True
    crop_size: int = 224
    crops_per_slice: int = 5
    crop_shift: int = 16
    augment: bool = True
    rotation_deg: float = 15.0
    shear_max: float = 0.1
    zoom_min: float = 0.9
    zoom_max: float = 1.1
    checkpoint_every: int = 100
    gen_levels: int = 4
    gen_widths: tuple[int, ...] = (16, 24, 32, 40)
    gen_dilations: tuple[int, ...] = (1, 1, 2, 4)
    gen_param_budget: tuple[int, int] | None = (100_000, 250_000)
    disc_widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        for name in ("lam", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.pretrain_iters < 0 or self.total_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0 (it feeds numpy seed sequences)")
        if self.crop_size % 2 ** (self.gen_levels - 1):
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by "
                f"2^{self.gen_levels - 1}")
        if not 1 <= self.crops_per_slice <= 5:
            raise ConfigError("crops_per_slice must be in [1, 5]")

    @property
    def transfer_enabled(self) -> bool:
        return self.lam < 1.0

    def loss_weights(self) -> LossWeights:
        return LossWeights(beta1=self.beta1, beta2=self.beta2, lam=self.lam)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(levels=self.gen_levels, widths=self.gen_widths,
                               dilations=self.gen_dilations,
                               param_budget=self.gen_param_budget)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(widths=self.disc_widths)


# --- flat key = value config files ----------------------------------------


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    if text.lower() == "none":
        return None
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    # remaining fields are int tuples
    return tuple(int(v) for v in text.split(",") if v.strip())


def save_config(config: TrainConfig, path) -> None:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}"
             for f in dataclasses.fields(config)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    types = {"lam": float, "beta1": float, "beta2": float, "lr": float,
             "decay": float, "batch_size": int, "pretrain_iters": int,
             "total_iters": int, "seed": int, "non_saturating_g": bool,
             "include_t_in_d_real": bool, "crop_size": int,
             "crops_per_slice": int, "crop_shift": int, "augment": bool,
             "rotation_deg": float, "shear_max": float, "zoom_min": float,
             "zoom_max": float, "checkpoint_every": int, "gen_levels": int,
             "gen_widths": tuple, "gen_dilations": tuple,
             "gen_param_budget": tuple, "disc_widths": tuple}
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(text, types[key])
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_to_dict(config: TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def config_from_dict(payload: dict) -> TrainConfig:
    kwargs = dict(payload)
    for k in ("gen_widths", "gen_dilations", "disc_widths", "gen_param_budget"):
        if kwargs.get(k) is not None:
            kwargs[k] = tuple(kwargs[k])
    return TrainConfig(**kwargs)


# --- training state ---------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    iteration: int
    g_params: ModelParams
    d_params: ModelParams
    adam_g: AdamState
    adam_d: AdamState

    @property
    def phase(self) -> str:
        return PRETRAIN if self.iteration < self.config.pretrain_iters \
            else ADVERSARIAL


def init_state(config: TrainConfig) -> TrainState:
    g = build_generator(config.generator_config(), seed=config.seed)
    d = build_discriminator(config.discriminator_config(), seed=config.seed + 1)
    adam = dict(lr=config.lr, decay=config.decay)
    return TrainState(config, 0, g, d, AdamState(**adam), AdamState(**adam))


def _adam_meta(a: AdamState) -> dict:
    return {"lr": a.lr, "decay": a.decay, "beta1": a.beta1, "beta2": a.beta2,
            "epsilon": a.epsilon, "step_count": a.step_count}


def save_state(state: TrainState, path) -> None:
    header = {
        "iteration": state.iteration,
        "phase": state.phase,
        "config": config_to_dict(state.config),
        "adam_g": _adam_meta(state.adam_g),
        "adam_d": _adam_meta(state.adam_d),
    }
    blocks: list[tuple[str, np.ndarray]] = []
    for prefix, params in (("g", state.g_params), ("d", state.d_params)):
        for name, t in params.tensors.items():
            blocks.append((f"{prefix}.{name}", t.data))
    for prefix, adam, params in (("adam_g", state.adam_g, state.g_params),
                                 ("adam_d", state.adam_d, state.d_params)):
        names = params.names()
        for kind, arrays in (("m", adam.m), ("v", adam.v)):
            for name, arr in zip(names, arrays):
                blocks.append((f"{prefix}.{kind}.{name}", arr))

    blob = bytearray()
    blob += STATE_MAGIC
    blob += struct.pack("<I", STATE_VERSION)
    hdr = json.dumps(header, sort_keys=True).encode()
    blob += struct.pack("<I", len(hdr)) + hdr
    blob += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        nb = name.encode()
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


def load_state(path) -> TrainState:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ConfigError(f"{path}: truncated state file")
        out = raw[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    if take(4) != STATE_MAGIC:
        raise ConfigError(f"{path}: not a training state file")
    if u32() != STATE_VERSION:
        raise ConfigError(f"{path}: unsupported state version")
    header = json.loads(take(u32()).decode())
    config = config_from_dict(header["config"])

    arrays: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()

    state = init_state(config)
    state.iteration = header["iteration"]
    for prefix, params in (("g", state.g_params), ("d", state.d_params)):
        for name, t in params.tensors.items():
            t.data = arrays[f"{prefix}.{name}"]
    for prefix, adam, params in (("adam_g", state.adam_g, state.g_params),
                                 ("adam_d", state.adam_d, state.d_params)):
        meta = header[prefix]
        adam.lr = meta["lr"]
        adam.decay = meta["decay"]
        adam.beta1 = meta["beta1"]
        adam.beta2 = meta["beta2"]
        adam.epsilon = meta["epsilon"]
        adam.step_count = meta["step_count"]
        if adam.step_count > 0:
            adam.m = [arrays[f"{prefix}.m.{n}"] for n in params.names()]
            adam.v = [arrays[f"{prefix}.v.{n}"] for n in params.names()]
    return state


# --- sample pools and batch materialization --------------------------------


def build_sample_pools(manifest: DatasetManifest, config: TrainConfig,
                       split: str = "train"):
    """Expert crops from every annotated training case; pseudo crops from the
    transfer set when transfer is enabled."""
    cases = manifest.load_split(split)
    s_samples: list[TrainSample] = []
    for case in cases:
        if case.mask is None:
            continue
        for img, msk in _case_crops(case.volume.values, case.mask.labels, config):
            s_samples.append(TrainSample(img, msk, EXPERT))

    t_samples: list[TrainSample] = []
    if config.transfer_enabled:
        for pc in assemble_transfer_set(cases):
            for img, msk in _slice_crops(pc.target_image, pc.pseudo_mask, config):
                t_samples.append(TrainSample(img, msk, PSEUDO))
    if not s_samples:
        raise DataError(f"no annotated samples in split {split!r}")
    return s_samples, t_samples


def _case_crops(values, labels, config):
    for sl in range(values.shape[0]):
        if not labels[sl].any():
            continue  # nothing annotated: no ROI to crop around
        yield from _slice_crops(values[sl], labels[sl], config)


def _slice_crops(image, mask, config):
    if not mask.any():
        return
    crops = crop_rois(image, mask, crop=config.crop_size,
                      max_shift=config.crop_shift)
    yield from crops[:config.crops_per_slice]


def materialize_batch(samples: list[TrainSample], config: TrainConfig,
                      draw: int):
    """Stack a batch: optional augmentation, then per-crop z-score."""
    images, labels, tags = [], [], []
    for slot, s in enumerate(samples):
        img, msk = s.image, s.mask
        if config.augment:
            img, msk = augment(img, msk, seed=[config.seed, 7, draw, slot],
                               rotation_deg=config.rotation_deg,
                               shear_max=config.shear_max,
                               zoom_range=(config.zoom_min, config.zoom_max))
        images.append(zscore_normalize(img))
        labels.append(msk)
        tags.append(s.tag)
    batch_img = np.stack(images)[:, None, :, :].astype(np.float32)
    batch_lab = np.stack(labels)
    onehot = np.ascontiguousarray(
        np.eye(4, dtype=np.float32)[batch_lab].transpose(0, 3, 1, 2))
    return batch_img, onehot, tags


def _split_indices(tags):
    s_idx = [i for i, t in enumerate(tags) if t == EXPERT]
    t_idx = [i for i, t in enumerate(tags) if t == PSEUDO]
    return s_idx, t_idx


# --- training steps ---------------------------------------------------------


def _seg_log_values(probs_data, onehot, tags, w) -> dict:
    """Diagnostic loss values over the batch, outside the tape."""
    out = {}
    with no_grad():
        p = Tensor(probs_data)
        out["L_ce"] = cross_entropy(p, onehot).item()
        out["L_Dice"] = dice_loss(p, onehot, w.dice_epsilon).item()
        s_idx, t_idx = _split_indices(tags)
        out["L_ID"] = (loss_ID(Tensor(probs_data[s_idx]), onehot[s_idx], w).item()
                       if s_idx else math.nan)
        out["L_DT"] = (loss_DT(Tensor(probs_data[t_idx]), onehot[t_idx], w).item()
                       if t_idx else math.nan)
    return out


def pretrain_step(state: TrainState, batch, draw: int) -> dict:
    """One Adam step on the generator segmentation objective; the
    discriminator is untouched."""
    cfg = state.config
    w = cfg.loss_weights()
    images, onehot, tags = materialize_batch(batch, cfg, draw)
    zero_grads(state.g_params.trainables())
    with Tape():
        probs = ad.softmax_channels(generator_forward(state.g_params, images))
        lg = loss_G(probs, onehot, tags, w)
        if not np.isfinite(lg.item()):
            raise NumericalError(f"non-finite generator loss at iteration "
                                 f"{state.iteration}")
        backward(lg)
        probs_data = probs.data
    adam_step(state.adam_g, state.g_params.trainables())
    values = _seg_log_values(probs_data, onehot, tags, w)
    values.update({"L_G": lg.item(), "L_D": math.nan, "L_adv": math.nan})
    return values


def _adversarial_g_terms(d_fake: Tensor, tags, non_saturating: bool):
    """The generator-side adversarial objective (to minimize)."""
    s_idx, t_idx = _split_indices(tags)
    total = None
    for idx in (s_idx, t_idx):
        if not idx:
            continue
        d = ad.take_batch(d_fake, idx)
        d = ad.clamp(d, 1e-7, 1.0 - 1e-7)
        if non_saturating:
            term = ad.log(d).mean() * -1.0
        else:
            term = ad.log(1.0 - d).mean()
        total = term if total is None else total + term
    return total


def d_substep(state: TrainState, batch, draw: int) -> float:
    """Discriminator ascent with the generator frozen (its forward runs
    without recording, so no gradient can reach it)."""
    cfg = state.config
    images, onehot, tags = materialize_batch(batch, cfg, draw)
    with no_grad():
        fake = ad.softmax_channels(
            generator_forward(state.g_params, images)).data
    s_idx, t_idx = _split_indices(tags)
    zero_grads(state.d_params.trainables())
    with Tape():
        d_real = discriminator_forward(state.d_params, images, onehot)
        d_fake = discriminator_forward(state.d_params, images, fake)
        d_real_s = ad.take_batch(d_real, s_idx) if s_idx else None
        d_fake_s = ad.take_batch(d_fake, s_idx) if s_idx else None
        d_real_t = (ad.take_batch(d_real, t_idx)
                    if t_idx and cfg.include_t_in_d_real else None)
        d_fake_t = ad.take_batch(d_fake, t_idx) if t_idx else None
        ld = loss_D(d_real_s, d_real_t, d_fake_s, d_fake_t)
        if not np.isfinite(ld.item()):
            raise NumericalError(f"non-finite discriminator loss at iteration "
                                 f"{state.iteration}")
        backward(ld * -1.0)  # ascend on L_D
    adam_step(state.adam_d, state.d_params.trainables())
    return ld.item()


def g_substep(state: TrainState, batch, draw: int) -> dict:
    """Generator descent on its segmentation loss plus the fake terms of the
    adversarial objective, with the discriminator frozen."""
    cfg = state.config
    w = cfg.loss_weights()
    images, onehot, tags = materialize_batch(batch, cfg, draw)
    state.d_params.set_requires_grad(False)
    try:
        zero_grads(state.g_params.trainables())
        with Tape():
            probs = ad.softmax_channels(generator_forward(state.g_params, images))
            lg = loss_G(probs, onehot, tags, w)
            d_fake = discriminator_forward(state.d_params, images, probs)
            adv = _adversarial_g_terms(d_fake, tags, cfg.non_saturating_g)
            total = lg if adv is None else lg + adv
            if not np.isfinite(total.item()):
                raise NumericalError(f"non-finite generator objective at "
                                     f"iteration {state.iteration}")
            backward(total)
            probs_data = probs.data
        adam_step(state.adam_g, state.g_params.trainables())
    finally:
        state.d_params.set_requires_grad(True)
    values = _seg_log_values(probs_data, onehot, tags, w)
    values["L_G"] = lg.item()
    return values


def adversarial_step(state: TrainState, batch_d, batch_g, draw_d: int,
                     draw_g: int) -> dict:
    l_d = d_substep(state, batch_d, draw_d)
    values = g_substep(state, batch_g, draw_g)
    values["L_D"] = l_d
    values["L_adv"] = l_d + values["L_G"]
    return values


def _draw_for_iteration(i: int, j: int) -> int:
    """Mini-batch draw counter: pretraining consumes one batch per iteration,
    the adversarial phase two."""
    return i if i < j else j + 2 * (i - j)


@dataclass
class TrainResult:
    out_dir: Path
    generator_path: Path
    discriminator_path: Path
    state_path: Path
    log_path: Path
    iterations: int


def train(config: TrainConfig, manifest_path, out_dir, resume_from=None,
          stop_at: int | None = None) -> TrainResult:
    """Run the full procedure and leave checkpoints plus a loss log behind.

    ``stop_at`` halts early (state still written, for resume tests);
    ``resume_from`` continues bit-identically from a saved state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path)

    if resume_from is not None:
        state = load_state(resume_from)
        if config_to_dict(state.config) != config_to_dict(config):
            raise ConfigError("resume state was produced by a different config")
    else:
        state = init_state(config)

    s_samples, t_samples = build_sample_pools(manifest, config)
    plan = BatchPlan(s_samples, t_samples, config.batch_size, config.seed)

    j, k = config.pretrain_iters, config.total_iters
    end = max(j, k)
    if stop_at is not None:
        end = min(end, stop_at)

    log_path = out / "training_log.csv"
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    log = open(log_path, mode)
    if mode == "w":
        log.write(",".join(LOG_COLUMNS) + "\n")

    skipped = 0
    try:
        while state.iteration < end:
            i = state.iteration
            draw = _draw_for_iteration(i, j)
            try:
                if i < j:
                    values = pretrain_step(state, plan.batch(draw), draw)
                else:
                    values = adversarial_step(state, plan.batch(draw),
                                              plan.batch(draw + 1), draw,
                                              draw + 1)
            except NumericalError as e:
                skipped += 1
                log.write(f"# iteration {i} skipped: {e}\n")
                values = {c: math.nan for c in LOG_COLUMNS[1:]}
            row = [str(i)] + [f"{values[c]:.9g}" for c in LOG_COLUMNS[1:]]
            log.write(",".join(row) + "\n")
            state.iteration += 1
            if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_state(state, out / f"state_{state.iteration:06d}.ckpt")
    finally:
        log.close()

    state_path = out / "state.ckpt"
    save_state(state, state_path)
    gen_path = out / "generator.ckpt"
    disc_path = out / "discriminator.ckpt"
    save_checkpoint(state.g_params, gen_path)
    save_checkpoint(state.d_params, disc_path)
    return TrainResult(out, gen_path, disc_path, state_path, log_path,
                       state.iteration)


# --- prediction and overlays ------------------------------------------------


def center_crop_or_pad(slice2d: np.ndarray, size: int):
    """Center crop/pad to size x size; returns the window plus placement
    metadata for undoing it."""
    h, w = slice2d.shape
    ph, pw = max(0, size - h), max(0, size - w)
    padded = np.pad(slice2d, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    hp, wp = padded.shape
    r0 = (hp - size) // 2
    c0 = (wp - size) // 2
    window = padded[r0:r0 + size, c0:c0 + size]
    return window, (ph // 2, pw // 2, r0, c0)


def _uncrop_labels(labels: np.ndarray, meta, native_shape):
    pad_r, pad_c, r0, c0 = meta
    h, w = native_shape
    size = labels.shape[0]
    full = np.zeros((h + max(0, size - h), w + max(0, size - w)), labels.dtype)
    full[r0:r0 + size, c0:c0 + size] = labels
    return full[pad_r:pad_r + h, pad_c:pad_c + w]


def predict(params: ModelParams | str | Path, volume: Volume,
            crop_size: int | None = None, batch_slices: int = 8) -> MaskVolume:
    """Segment a volume: per-slice center crop, z-score, generator forward,
    per-pixel argmax (ties resolve to the lowest class), uncrop."""
    if not isinstance(params, ModelParams):
        params = load_checkpoint(params)
    if params.kind != "generator":
        raise ConfigError(f"expected a generator checkpoint, got {params.kind}")
    cfg: GeneratorConfig = params.config
    size = crop_size if crop_size is not None else 224
    if size % 2 ** (cfg.levels - 1):
        raise ConfigError(f"crop size {size} not divisible by the generator's "
                          f"downsampling factor")

    windows, metas = [], []
    for sl in volume.values:
        win, meta = center_crop_or_pad(sl, size)
        windows.append(zscore_normalize(win))
        metas.append(meta)
    stack = np.stack(windows)[:, None, :, :].astype(np.float32)

    labels = np.empty((len(windows), size, size), np.uint8)
    for start in range(0, len(windows), batch_slices):
        chunk = stack[start:start + batch_slices]
        with no_grad():
            logits = generator_forward(params, chunk)
        labels[start:start + len(chunk)] = np.argmax(logits.data, axis=1)

    native = volume.values.shape[1:]
    out = np.stack([_uncrop_labels(lab, meta, native)
                    for lab, meta in zip(labels, metas)])
    return MaskVolume(out, spacing=volume.spacing, provenance=PREDICTED,
                      modality=volume.modality, patient_id=volume.patient_id)


def export_overlays(volume: Volume, mask: MaskVolume, out_dir) -> list[Path]:
    """Per-slice grayscale images with the class-colored mask blended in
    (1 red, 2 green, 3 blue at fixed alpha 0.4), as binary PPM files."""
    if volume.values.shape != mask.labels.shape:
        raise DataError(f"volume {volume.values.shape} and mask "
                        f"{mask.labels.shape} extents differ")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise DataError(f"cannot write overlays to {out}: {e}") from e

    paths = []
    for idx, (sl, lab) in enumerate(zip(volume.values, mask.labels)):
        lo, hi = float(sl.min()), float(sl.max())
        gray = np.zeros_like(sl) if hi == lo else (sl - lo) / (hi - lo)
        rgb = np.repeat((gray * 255.0)[:, :, None], 3, axis=2)
        for label, color in OVERLAY_COLORS.items():
            hit = lab == label
            rgb[hit] = ((1.0 - OVERLAY_ALPHA) * rgb[hit]
                        + OVERLAY_ALPHA * np.asarray(color, np.float64))
        data = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        path = out / f"slice_{idx:03d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
            f.write(data.tobytes())
        paths.append(path)
    return paths


def render_loss_plots(log_csv, out_dir) -> list[Path]:
    """Loss-curve images from a training log CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    with open(log_csv) as f:
        header = f.readline().strip().split(",")
        if header != list(LOG_COLUMNS):
            raise DataError(f"{log_csv}: unexpected columns {header}")
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    if not rows:
        raise DataError(f"{log_csv}: no loss rows")
    table = np.asarray(rows)
    cols = {name: table[:, i] for i, name in enumerate(LOG_COLUMNS)}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    groups = [("losses_generator.png", ("L_ce", "L_Dice", "L_ID", "L_DT", "L_G")),
              ("losses_adversarial.png", ("L_D", "L_adv"))]
    for fname, names in groups:
        fig, ax = plt.subplots(figsize=(7, 4))
        for name in names:
            valid = np.isfinite(cols[name])
            if valid.any():
                ax.plot(cols["iteration"][valid], cols[name][valid], label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths
