"""Dataset files, preprocessing, augmentation, batching, and the synthetic
phantom generator.

File formats (all little-endian, slice-major):
  <name>.vol   raw float32 image values; sidecar <name>.json holds
               {extents, spacing_mm, modality, patient_id, dtype}
  <name>.msk   raw uint8 label values in {0: background, 1: LV, 2: myo,
               3: RV}; the sidecar adds {provenance, label_names}
  manifest     JSON list of cases with file paths, annotation flags and a
               train/val/test split; a patient never spans two splits.

The preprocessing order is fixed: crop around the annotation, then augment,
then z-score normalize the crop. All randomized steps are pure functions of
their seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .losses import EXPERT, PSEUDO

MODALITIES = ("bSSFP", "T2", "LGE")
LABEL_NAMES = {0: "background", 1: "LV", 2: "myo", 3: "RV"}
N_CLASSES = 4
PREDICTED = "PREDICTED"  # masks produced by the model, vs dataset EXPERT/PSEUDO


@dataclass
class Volume:
    values: np.ndarray  # (slices, H, W) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm per axis
    modality: str = "LGE"
    patient_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DataError(f"volume needs positive (S,H,W), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("volume contains non-finite values")
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")


@dataclass
class MaskVolume:
    labels: np.ndarray  # (slices, H, W) uint8 in {0,1,2,3}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: str = EXPERT
    modality: str = "LGE"
    patient_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.dtype != np.uint8:
            if self.labels.min() < 0 or self.labels.max() > 255:
                raise DataError("mask labels outside uint8 range")
            self.labels = self.labels.astype(np.uint8)
        if self.labels.ndim != 3:
            raise DataError(f"mask needs (S,H,W), got {self.labels.shape}")
        bad = set(np.unique(self.labels)) - set(LABEL_NAMES)
        if bad:
            raise DataError(f"mask contains labels outside {{0,1,2,3}}: {sorted(bad)}")
        if self.provenance not in (EXPERT, PSEUDO, PREDICTED):
            raise DataError(f"unknown provenance {self.provenance!r}")


@dataclass
class Case:
    """One patient-modality pair: the image volume plus an optional mask."""

    volume: Volume
    mask: MaskVolume | None = None

    @property
    def provenance(self) -> str | None:
        return self.mask.provenance if self.mask is not None else None


@dataclass
class ManifestEntry:
    volume_path: str
    mask_path: str | None
    patient_id: str
    modality: str
    split: str  # train | val | test


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        splits: dict[str, str] = {}
        for e in self.entries:
            prev = splits.setdefault(e.patient_id, e.split)
            if prev != e.split:
                raise DataError(
                    f"patient {e.patient_id} appears in splits {prev} and {e.split}")

    def for_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def load_case(self, entry: ManifestEntry) -> Case:
        vol = load_volume(self.root / entry.volume_path)
        mask = load_mask(self.root / entry.mask_path) if entry.mask_path else None
        return Case(vol, mask)

    def load_split(self, split: str) -> list[Case]:
        return [self.load_case(e) for e in self.for_split(split)]


# ---------------------------------------------------------------------------
# file io


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(vol: Volume, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(vol.values, dtype="<f4").tobytes())
    meta = {"extents": list(vol.values.shape), "spacing_mm": list(vol.spacing),
            "modality": vol.modality, "patient_id": vol.patient_id,
            "dtype": "float32"}
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_volume(path) -> Volume:
    path = Path(path)
    meta = _read_sidecar(path)
    extents = tuple(meta["extents"])
    raw = path.read_bytes()
    expect = int(np.prod(extents)) * 4
    if len(raw) != expect:
        raise DataError(f"{path}: expected {expect} bytes for extents {extents}, "
                        f"found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()
    return Volume(values, tuple(meta["spacing_mm"]), meta["modality"],
                  meta["patient_id"])


def save_mask(mask: MaskVolume, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(mask.labels.tobytes())
    meta = {"extents": list(mask.labels.shape), "spacing_mm": list(mask.spacing),
            "modality": mask.modality, "patient_id": mask.patient_id,
            "dtype": "uint8", "provenance": mask.provenance,
            "label_names": {str(k): v for k, v in LABEL_NAMES.items()}}
    if mask.provenance == PSEUDO:
        meta["pseudo"] = True
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_mask(path) -> MaskVolume:
    path = Path(path)
    meta = _read_sidecar(path)
    extents = tuple(meta["extents"])
    raw = path.read_bytes()
    expect = int(np.prod(extents))
    if len(raw) != expect:
        raise DataError(f"{path}: expected {expect} bytes for extents {extents}, "
                        f"found {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(extents).copy()
    return MaskVolume(labels, tuple(meta["spacing_mm"]),
                      meta.get("provenance", EXPERT), meta.get("modality", "LGE"),
                      meta.get("patient_id", ""))


def _read_sidecar(path: Path) -> dict:
    sc = _sidecar(path)
    if not sc.exists():
        raise DataError(f"missing sidecar metadata {sc}")
    try:
        return json.loads(sc.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt sidecar {sc}: {e}") from e


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = [{"volume": e.volume_path, "mask": e.mask_path,
                "patient_id": e.patient_id, "modality": e.modality,
                "split": e.split} for e in manifest.entries]
    Path(path).write_text(json.dumps({"cases": payload}, indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt manifest {path}: {e}") from e
    entries = [ManifestEntry(c["volume"], c.get("mask"), c["patient_id"],
                             c["modality"], c["split"])
               for c in payload["cases"]]
    return DatasetManifest(entries, root=path.parent)


# ---------------------------------------------------------------------------
# preprocessing


def zscore_normalize(slice2d: np.ndarray) -> np.ndarray:
    """Per-slice z-score; a constant slice maps to all zeros (flagged)."""
    a = np.asarray(slice2d, np.float32)
    std = a.std(dtype=np.float64)
    if std == 0.0:
        warnings.warn("constant slice: z-score undefined, returning zeros")
        return np.zeros_like(a)
    return ((a - a.mean(dtype=np.float64)) / std).astype(np.float32)


def _bbox(mask2d: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    if rows.size == 0:
        raise DataError("cannot place a crop: mask has no annotated pixels")
    return rows[0], rows[-1], cols[0], cols[-1]


def _pad_to(img, mask, crop: int):
    h, w = img.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    if ph == 0 and pw == 0:
        return img, mask
    pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    return (np.pad(img, pad), np.pad(mask, pad))


def crop_rois(slice2d: np.ndarray, mask2d: np.ndarray, crop: int = 224,
              max_shift: int = 16) -> list[tuple[np.ndarray, np.ndarray]]:
    """Five congruent (image, mask) crops that all contain the annotation
    bounding box: centered, then shifted along each axis by up to
    ``max_shift`` pixels (clamped to the valid origin range, so crops can
    coincide near borders)."""
    img, mask = _pad_to(np.asarray(slice2d), np.asarray(mask2d), crop)
    h, w = img.shape
    r0, r1, c0, c1 = _bbox(mask)
    if r1 - r0 + 1 > crop or c1 - c0 + 1 > crop:
        raise DataError(
            f"annotation bounding box {(r1 - r0 + 1)}x{(c1 - c0 + 1)} exceeds "
            f"the {crop}x{crop} crop")

    # origin ranges that keep the crop in-bounds and the bbox inside it
    lo_r, hi_r = max(0, r1 + 1 - crop), min(h - crop, r0)
    lo_c, hi_c = max(0, c1 + 1 - crop), min(w - crop, c0)
    ctr_r = int(np.clip((r0 + r1 + 1) // 2 - crop // 2, lo_r, hi_r))
    ctr_c = int(np.clip((c0 + c1 + 1) // 2 - crop // 2, lo_c, hi_c))

    def origin(dr, dc):
        return (int(np.clip(ctr_r + dr, lo_r, hi_r)),
                int(np.clip(ctr_c + dc, lo_c, hi_c)))

    d = max_shift
    origins = [origin(0, 0), origin(d, 0), origin(-d, 0), origin(0, d),
               origin(0, -d)]
    return [(img[r:r + crop, c:c + crop].copy(),
             mask[r:r + crop, c:c + crop].copy()) for r, c in origins]


# ---------------------------------------------------------------------------
# augmentation


def apply_geometric(image: np.ndarray, mask: np.ndarray, angle_deg: float,
                    shear: float, zoom: float):
    """Rotate, shear, and zoom about the center: bilinear for the image,
    nearest-neighbor for the mask, zero/background fill out of bounds."""
    if image.shape != mask.shape:
        raise DataError(f"image {image.shape} and mask {mask.shape} differ")
    h, w = image.shape
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    scl = np.array([[zoom, 0.0], [0.0, zoom]])
    fwd = rot @ shr @ scl
    inv = np.linalg.inv(fwd)

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_y = inv[0, 0] * (yy - cy) + inv[0, 1] * (xx - cx) + cy
    src_x = inv[1, 0] * (yy - cy) + inv[1, 1] * (xx - cx) + cx

    # bilinear image sample
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    fy = src_y - y0
    fx = src_x - x0
    valid = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    img = np.asarray(image, np.float64)
    out_img = ((1 - fy) * (1 - fx) * img[y0c, x0c] + (1 - fy) * fx * img[y0c, x1c]
               + fy * (1 - fx) * img[y1c, x0c] + fy * fx * img[y1c, x1c])
    out_img = np.where(valid, out_img, 0.0).astype(np.float32)

    # nearest-neighbor mask sample
    yn = np.rint(src_y).astype(np.intp)
    xn = np.rint(src_x).astype(np.intp)
    nn_valid = (yn >= 0) & (yn < h) & (xn >= 0) & (xn < w)
    out_mask = np.zeros_like(np.asarray(mask))
    out_mask[nn_valid] = np.asarray(mask)[np.clip(yn, 0, h - 1),
                                          np.clip(xn, 0, w - 1)][nn_valid]
    return out_img, out_mask


def augment(image: np.ndarray, mask: np.ndarray, seed,
            rotation_deg: float = 15.0, shear_max: float = 0.1,
            zoom_range: tuple[float, float] = (0.9, 1.1)):
    """Random rotation/shear/zoom, identical for image and mask, drawn
    deterministically from the seed."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-rotation_deg, rotation_deg)
    shear = rng.uniform(-shear_max, shear_max)
    zoom = rng.uniform(*zoom_range)
    return apply_geometric(image, mask, angle, shear, zoom)


# ---------------------------------------------------------------------------
# synthetic phantoms


_INTENSITY = {
    # per-modality mean intensity for (background, LV, myo, RV); LGE gets a
    # deliberately ambiguous myocardium so that source-only training
    # generalizes poorly to it
    "bSSFP": (0.20, 0.90, 0.50, 0.85),
    "T2": (0.15, 0.80, 0.45, 0.70),
    "LGE": (0.28, 0.85, 0.33, 0.80),
}
_NOISE_SIGMA = 0.06


def _phantom_slice(size: int, scale: float, cy: float, cx: float, r_lv: float,
                   myo_t: float, r_rv: float) -> np.ndarray:
    """Latent anatomy: LV disk, myo annulus around it, RV crescent to the
    left, all scaled by the slice profile."""
    yy, xx = np.mgrid[0:size, 0:size]
    labels = np.zeros((size, size), np.uint8)
    r_lv_s = r_lv * scale
    r_out = (r_lv + myo_t) * scale
    d_heart = np.hypot(yy - cy, xx - cx)
    labels[d_heart <= r_out] = 2
    labels[d_heart <= r_lv_s] = 1
    rv_cx = cx - (r_out + 0.55 * r_rv * scale)
    d_rv = np.hypot(yy - cy, xx - rv_cx)
    labels[(d_rv <= r_rv * scale) & (d_heart > r_out)] = 3
    return labels


def synth_phantom(seed: int, patients: int,
                  slices_per_modality: tuple[int, int, int] = (6, 5, 4),
                  size: int = 96, lge_labeled: int = 0,
                  out_dir=None) -> tuple[list[Case], DatasetManifest | None]:
    """Generate per-patient bSSFP/T2/LGE volumes sharing latent anatomy.

    Expert masks cover every bSSFP and T2 volume; only the first
    ``lge_labeled`` patients get expert LGE masks (those patients are
    assigned to the val split, the rest to train). With ``out_dir`` set the
    dataset is also written to disk and a manifest returned.
    """
    if patients < 1:
        raise DataError("need at least one patient")
    counts = dict(zip(MODALITIES, slices_per_modality))
    cases: list[Case] = []
    entries: list[ManifestEntry] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for p in range(patients):
        pid = f"p{p:03d}"
        prng = np.random.default_rng([seed, p])
        cy = size / 2 + prng.uniform(-4, 4)
        cx = size / 2 + prng.uniform(-2, 6)  # leave room for the RV crescent
        r_lv = prng.uniform(0.09, 0.12) * size
        myo_t = prng.uniform(0.035, 0.05) * size
        r_rv = prng.uniform(0.08, 0.11) * size
        labeled_lge = p < lge_labeled
        split = "val" if labeled_lge else "train"

        for modality in MODALITIES:
            n = counts[modality]
            mrng = np.random.default_rng([seed, p, MODALITIES.index(modality)])
            jitter_y = mrng.uniform(-1, 1)
            jitter_x = mrng.uniform(-1, 1)
            means = _INTENSITY[modality]
            vol = np.empty((n, size, size), np.float32)
            lab = np.empty((n, size, size), np.uint8)
            for s in range(n):
                t = (s + 0.5) / n
                scale = 0.6 + 0.4 * np.sin(np.pi * t)
                labels = _phantom_slice(size, scale, cy + jitter_y, cx + jitter_x,
                                        r_lv, myo_t, r_rv)
                img = np.take(np.asarray(means, np.float32), labels)
                img = img + mrng.normal(0, _NOISE_SIGMA, img.shape)
                vol[s] = img.astype(np.float32)
                lab[s] = labels
            volume = Volume(vol, modality=modality, patient_id=pid)
            has_mask = modality != "LGE" or labeled_lge
            mask = (MaskVolume(lab, modality=modality, patient_id=pid)
                    if has_mask else None)
            cases.append(Case(volume, mask))

            if out is not None:
                base = f"{pid}_{modality.lower()}"
                save_volume(volume, out / f"{base}.vol")
                mask_path = None
                if mask is not None:
                    mask_path = f"{base}_mask.msk"
                    save_mask(mask, out / mask_path)
                entries.append(ManifestEntry(f"{base}.vol", mask_path, pid,
                                             modality, split))

    manifest = None
    if out is not None:
        manifest = DatasetManifest(entries, root=out)
        save_manifest(manifest, out / "manifest.json")
    return cases, manifest


# ---------------------------------------------------------------------------
# batching


@dataclass
class TrainSample:
    image: np.ndarray  # 2-d float32 crop, not yet normalized
    mask: np.ndarray  # 2-d uint8 crop
    tag: str  # EXPERT | PSEUDO


@dataclass
class BatchPlan:
    """Deterministic random-access batch schedule over expert set S and
    pseudo set T.

    Every epoch reshuffles both sets from (seed, epoch); each batch mixes
    the two proportionally to their sizes with at least one expert sample
    whenever S can cover all batches of the epoch; the final partial batch
    is delivered.
    """

    s_samples: list
    t_samples: list
    batch_size: int
    seed: int

    def __post_init__(self):
        if not self.s_samples:
            raise DataError("expert set S must be non-empty")
        if self.batch_size < 1:
            raise DataError("batch size must be >= 1")
        total = len(self.s_samples) + len(self.t_samples)
        self.batches_per_epoch = -(-total // self.batch_size)
        ns, nt = len(self.s_samples), len(self.t_samples)
        # cumulative proportional allocation, then guarantee one expert per
        # batch where possible
        cum = [min((i + 1) * self.batch_size, total)
               for i in range(self.batches_per_epoch)]
        cum_s = [round(c * ns / total) for c in cum]
        cum_s[-1] = ns
        sizes_s = np.diff([0] + cum_s).astype(int)
        sizes_t = np.diff([0] + cum) - sizes_s
        if ns >= self.batches_per_epoch:
            for i in range(len(sizes_s)):
                if sizes_s[i] == 0:
                    donor = int(np.argmax(sizes_s))
                    sizes_s[i] += 1
                    sizes_s[donor] -= 1
                    sizes_t[i] -= 1
                    sizes_t[donor] += 1
        self._sizes_s = sizes_s
        self._sizes_t = sizes_t
        self._starts_s = np.concatenate([[0], np.cumsum(sizes_s)])
        self._starts_t = np.concatenate([[0], np.cumsum(sizes_t)])

    def batch(self, draw: int) -> list[TrainSample]:
        epoch, index = divmod(draw, self.batches_per_epoch)
        rng_s = np.random.default_rng([self.seed, 3, epoch])
        perm_s = rng_s.permutation(len(self.s_samples))
        picks = [self.s_samples[i]
                 for i in perm_s[self._starts_s[index]:self._starts_s[index + 1]]]
        if self.t_samples:
            rng_t = np.random.default_rng([self.seed, 5, epoch])
            perm_t = rng_t.permutation(len(self.t_samples))
            picks += [self.t_samples[i]
                      for i in perm_t[self._starts_t[index]:self._starts_t[index + 1]]]
        return picks


def batch_iterator(s_samples, t_samples, batch_size: int = 16, seed: int = 0):
    """Endless stream of tagged batches; see BatchPlan for the contract."""
    plan = BatchPlan(s_samples, t_samples, batch_size, seed)
    draw = 0
    while True:
        yield plan.batch(draw)
        draw += 1
