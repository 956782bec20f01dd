"""Command-line interface.

Subcommands: synth, transfer-masks, train, predict, evaluate, report.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericalError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _cmd_synth(args) -> int:
    from .data import synth_phantom
    slices = tuple(int(s) for s in args.slices.split(","))
    if len(slices) != 3:
        raise ConfigError("--slices needs three comma-separated counts "
                          "(bSSFP,T2,LGE)")
    patients = args.patients
    lge_labeled = round(args.lge_labeled_fraction * patients)
    _, manifest = synth_phantom(seed=args.seed, patients=patients,
                                slices_per_modality=slices, size=args.size,
                                lge_labeled=lge_labeled, out_dir=args.out)
    print(f"wrote {len(manifest.entries)} cases for {patients} patients to "
          f"{args.out} ({lge_labeled} with expert LGE masks)")
    return 0


def _cmd_transfer_masks(args) -> int:
    from .data import MaskVolume, load_manifest, save_mask
    from .transfer import build_pseudo_cases
    import numpy as np

    manifest = load_manifest(args.manifest)
    by_patient: dict[str, list] = {}
    for e in manifest.entries:
        by_patient.setdefault(e.patient_id, []).append(e)

    total = 0
    for pid in sorted(by_patient):
        entries = by_patient[pid]
        lge = [e for e in entries if e.modality == "LGE"]
        if not lge or any(e.mask_path for e in lge):
            continue
        target_entry = lge[0]
        target = manifest.load_case(target_entry)
        sources = [e for e in entries if e.modality != "LGE" and e.mask_path]
        for src_entry in sorted(sources, key=lambda e: e.modality):
            source = manifest.load_case(src_entry)
            cases = build_pseudo_cases(source, target)
            n = target.volume.values.shape[0]
            labels = np.zeros_like(target.volume.values, dtype=np.uint8)
            covered = []
            for pc in cases:
                labels[pc.target_index] = pc.pseudo_mask
                covered.append(pc.target_index)
            mask = MaskVolume(labels, spacing=target.volume.spacing,
                              provenance="PSEUDO", modality="LGE",
                              patient_id=pid)
            stem = Path(target_entry.volume_path).stem
            out_path = (manifest.root
                        / f"{stem}_pseudo_from_{source.volume.modality.lower()}.msk")
            save_mask(mask, out_path)
            m = source.volume.values.shape[0]
            collisions = m - len(cases)
            total += len(cases)
            print(f"{pid}: {source.volume.modality} ({m} slices) -> LGE "
                  f"({n} slices): {len(cases)} pseudo slices, "
                  f"{collisions} collisions, wrote {out_path.name}")
    print(f"total pseudo-labeled slices: {total}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, load_config, train
    config = load_config(args.config) if args.config else TrainConfig()
    result = train(config, args.manifest, args.out, resume_from=args.resume,
                   stop_at=args.stop_at)
    print(f"finished at iteration {result.iterations}")
    print(f"generator checkpoint: {result.generator_path}")
    print(f"training log: {result.log_path}")
    return 0


def _cmd_predict(args) -> int:
    from .data import load_volume, save_mask
    from .trainer import predict
    volume = load_volume(args.volume)
    mask = predict(args.checkpoint, volume, crop_size=args.crop)
    save_mask(mask, args.out)
    print(f"wrote {mask.labels.shape} prediction to {args.out}")
    if args.overlays:
        from .trainer import export_overlays
        paths = export_overlays(volume, mask, args.overlays)
        print(f"wrote {len(paths)} overlay images to {args.overlays}")
    return 0


def _cmd_evaluate(args) -> int:
    from .data import load_mask
    from .metrics import evaluate

    def collect(directory):
        paths = sorted(Path(directory).glob("*.msk"))
        if not paths:
            raise DataError(f"no .msk files under {directory}")
        return [load_mask(p) for p in paths]

    report = evaluate(collect(args.pred), collect(args.ref))
    out = Path(args.out)
    report.to_csv(out.with_suffix(".csv"))
    report.to_json(out.with_suffix(".json"))
    for c in (1, 2, 3):
        row = report.aggregate("mean", c)
        print(f"class {c}: dice {row.dice:.4f} jaccard {row.jaccard:.4f} "
              f"asd {row.asd_mm:.2f}mm hd {row.hd_mm:.2f}mm")
    print(f"mean foreground dice: {report.mean_foreground_dice():.4f}")
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.json')}")
    return 0


def _cmd_report(args) -> int:
    from .trainer import render_loss_plots
    paths = render_loss_plots(args.log, args.out)
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_convert(args) -> int:
    from .nifti_stub import convert_nifti_mask, convert_nifti_volume
    if args.mask:
        label_map = {}
        for pair in args.label_map.split(","):
            src, dst = pair.split(":")
            label_map[int(src)] = int(dst)
        mask = convert_nifti_mask(args.input, args.out, args.modality,
                                  args.patient, label_map)
        print(f"wrote mask {mask.labels.shape} to {args.out}")
    else:
        vol = convert_nifti_volume(args.input, args.out, args.modality,
                                   args.patient)
        print(f"wrote volume {vol.values.shape} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseg",
        description="Adversarial multi-sequence cardiac MR segmentation "
                    "with weak cross-modality mask transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=5)
    p.add_argument("--slices", default="6,5,4",
                   help="slice counts as bSSFP,T2,LGE")
    p.add_argument("--size", type=int, default=96, help="in-plane extent")
    p.add_argument("--lge-labeled-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("transfer-masks",
                       help="write pseudo LGE masks from annotated modalities")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_transfer_masks)

    p = sub.add_parser("train", help="run the training procedure")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="training state file to continue from")
    p.add_argument("--stop-at", type=int, default=None,
                   help="halt after this iteration (for resumable runs)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment a volume with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--overlays", help="directory for per-slice overlay images")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True, help="directory of predicted .msk")
    p.add_argument("--ref", required=True, help="directory of reference .msk")
    p.add_argument("--out", required=True, help="report path (suffix ignored)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render loss-curve plots from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("convert",
                       help="convert an uncompressed single-file NIfTI volume")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", required=True, choices=["bSSFP", "T2", "LGE"])
    p.add_argument("--patient", required=True)
    p.add_argument("--mask", action="store_true",
                   help="treat the input as a label volume")
    p.add_argument("--label-map", default="500:1,200:2,600:3",
                   help="source:target label pairs for mask conversion")
    p.set_defaults(func=_cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
