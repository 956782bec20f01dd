"""Desk-scale phantom experiments.

Two standard studies, both runnable from scripts/ and exercised by the
acceptance suite:

* overfit sanity: the generator alone (no adversary, no transfer) must be
  able to memorize a handful of expert slices nearly perfectly;
* transfer benefit: on phantoms whose LGE contrast differs from the
  annotated modalities, adding pseudo-mask supervision from bSSFP/T2 should
  not hurt, and typically helps, the held-out LGE score. Absolute values on
  the real challenge data are out of reach here; the comparison is
  directional.
"""

from __future__ import annotations

import json
import shutil
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .data import load_manifest, save_manifest, synth_phantom
from .metrics import evaluate
from .trainer import TrainConfig, predict, train


@dataclass
class ArmResult:
    name: str
    dices_per_seed: list[float] = field(default_factory=list)

    @property
    def median_dice(self) -> float:
        return statistics.median(self.dices_per_seed)


def _phantom_dir(root: Path, seed: int, patients: int, slices, size: int,
                 lge_labeled: int) -> Path:
    data_dir = root / f"phantom_s{seed}"
    synth_phantom(seed=seed, patients=patients, slices_per_modality=slices,
                  size=size, lge_labeled=lge_labeled, out_dir=data_dir)
    return data_dir


def run_overfit_sanity(out_dir=None, iters: int = 300, crop: int = 112,
                       n_slices: int = 8, seed: int = 0,
                       config: TrainConfig | None = None) -> dict:
    """Train the pure segmentation arm on a few expert slices and score it
    on those same slices. Returns the per-class and mean foreground Dice."""
    own_tmp = out_dir is None
    root = Path(tempfile.mkdtemp(prefix="overfit_")) if own_tmp else Path(out_dir)
    try:
        data_dir = _phantom_dir(root, seed=seed + 101, patients=1,
                                slices=(n_slices, 1, 1), size=crop,
                                lge_labeled=0)
        manifest = load_manifest(data_dir / "manifest.json")
        # keep exactly the bSSFP volume: n_slices expert-annotated slices
        manifest.entries = [e for e in manifest.entries if e.modality == "bSSFP"]
        save_manifest(manifest, data_dir / "manifest_overfit.json")

        if config is None:
            config = TrainConfig(lam=1.0, pretrain_iters=iters, total_iters=0,
                                 batch_size=8, crop_size=crop,
                                 crops_per_slice=1, augment=False,
                                 checkpoint_every=0, seed=seed)
        result = train(config, data_dir / "manifest_overfit.json", root / "run")

        case = manifest.load_case(manifest.entries[0])
        pred = predict(result.generator_path, case.volume, crop_size=crop)
        report = evaluate([pred], [case.mask])
        summary = {
            "mean_foreground_dice": report.mean_foreground_dice(),
            "per_class_dice": {c: report.aggregate("mean", c).dice
                               for c in (1, 2, 3)},
            "iterations": result.iterations,
            "log_path": str(result.log_path),
        }
        if not own_tmp:
            (root / "overfit_summary.json").write_text(
                json.dumps(summary, indent=1, default=str))
        return summary
    finally:
        if own_tmp:
            shutil.rmtree(root, ignore_errors=True)


TRANSFER_ARMS = {
    # qualitative analogue of the published comparison: with vs without the
    # weak transfer term, both adversarial
    "U+A+D": dict(lam=1.0),
    "U+A+D+T": dict(lam=0.9),
}


def transfer_experiment_config(lam: float, seed: int, *, crop: int = 64,
                               pretrain_iters: int = 150,
                               total_iters: int = 400,
                               batch_size: int = 8) -> TrainConfig:
    """Reduced-size profile used for the phantom comparison."""
    return TrainConfig(
        lam=lam, seed=seed, batch_size=batch_size,
        pretrain_iters=pretrain_iters, total_iters=total_iters,
        crop_size=crop, crops_per_slice=1, augment=False, checkpoint_every=0,
        gen_levels=4, gen_widths=(8, 12, 16, 20), gen_dilations=(1, 1, 2, 4),
        gen_param_budget=None, disc_widths=(8, 16, 32))


def run_transfer_benefit(out_dir=None, seeds=(0, 1, 2), patients: int = 15,
                         lge_labeled: int = 3, slices=(6, 5, 4),
                         size: int = 64, data_seed: int = 7,
                         verbose: bool = False, **profile) -> dict:
    """Train U+A+D and U+A+D+T across seeds on one phantom dataset and
    compare median held-out LGE Dice."""
    own_tmp = out_dir is None
    root = Path(tempfile.mkdtemp(prefix="transfer_")) if own_tmp else Path(out_dir)
    try:
        data_dir = _phantom_dir(root, seed=data_seed, patients=patients,
                                slices=slices, size=size,
                                lge_labeled=lge_labeled)
        manifest_path = data_dir / "manifest.json"
        manifest = load_manifest(manifest_path)
        val_cases = [manifest.load_case(e) for e in manifest.for_split("val")
                     if e.modality == "LGE"]
        if not val_cases:
            raise RuntimeError("phantom dataset produced no labeled val LGE")

        arms: dict[str, ArmResult] = {}
        for arm_name, arm_kwargs in TRANSFER_ARMS.items():
            arm = ArmResult(arm_name)
            for seed in seeds:
                config = transfer_experiment_config(
                    arm_kwargs["lam"], seed, crop=size, **profile)
                run_dir = root / f"{arm_name.replace('+', '')}_s{seed}"
                result = train(config, manifest_path, run_dir)
                preds = [predict(result.generator_path, c.volume, crop_size=size)
                         for c in val_cases]
                report = evaluate(preds, [c.mask for c in val_cases])
                arm.dices_per_seed.append(report.mean_foreground_dice())
                if verbose:
                    print(f"{arm_name} seed {seed}: "
                          f"dice {arm.dices_per_seed[-1]:.4f}")
            arms[arm_name] = arm

        summary = {
            "arms": {name: {"dices": arm.dices_per_seed,
                            "median": arm.median_dice}
                     for name, arm in arms.items()},
            "transfer_helps": arms["U+A+D+T"].median_dice
                              >= arms["U+A+D"].median_dice,
            "seeds": list(seeds),
        }
        if not own_tmp:
            (root / "transfer_summary.json").write_text(
                json.dumps(summary, indent=1))
        return summary
    finally:
        if own_tmp:
            shutil.rmtree(root, ignore_errors=True)
