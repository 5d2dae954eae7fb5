"""Command-line surface: dataset synthesis, fitting, rendering, evaluation,
ablation, and gradient self-checks.

Exit codes: 0 success, 1 validation error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import wgt
from .nn import OptimizerError
from .renderer import save_png
from .synth import Dataset, SceneConfig, synthesize
from .training import NumericalAbort, TrainConfig, Trainer, ablate, evaluate


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _train_config(args):
    d = {}
    if getattr(args, "config", None):
        raw = _load_json(args.config)
        d = raw.get("train", raw)
        d = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "sequential", False):
        d["sequential"] = True
    return TrainConfig.from_dict(d)


def _restore_trainer(dataset_dir, checkpoint):
    ds = Dataset(dataset_dir)
    _, meta = wgt.read_archive(checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    trainer = Trainer(ds, cfg)
    trainer.load_checkpoint(checkpoint)
    return trainer


def cmd_synth(args):
    raw = _load_json(args.config) if args.config else {}
    raw = raw.get("scene", raw)
    raw = {k: v for k, v in raw.items() if k in SceneConfig.__dataclass_fields__}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SceneConfig.from_dict(raw)
    synthesize(cfg, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_fit(args):
    cfg = _train_config(args)
    trainer = Trainer(Dataset(args.dataset), cfg)
    try:
        trainer.fit(log_path=args.log)
    except NumericalAbort as exc:
        trainer.save_checkpoint(args.out)
        print(f"numerical abort at frame {exc.frame}; "
              f"last-good checkpoint saved to {args.out}", file=sys.stderr)
        return 2
    trainer.save_checkpoint(args.out)
    print(f"fit complete; best val PSNR {trainer.best_val:.3f} dB; "
          f"checkpoint saved to {args.out}")
    return 0


def cmd_render(args):
    trainer = _restore_trainer(args.dataset, args.checkpoint)
    out = trainer.render_frame(args.frame, with_bias=args.with_bias)
    if args.out.endswith(".wgt"):
        wgt.write_tensor(args.out, out.rgb)
    else:
        save_png(args.out, out.rgb)
    print(f"rendered frame {args.frame} to {args.out}")
    return 0


def cmd_eval(args):
    trainer = _restore_trainer(args.dataset, args.checkpoint)
    rows = evaluate(trainer, split=args.split, with_bias=args.with_bias,
                    csv_path=args.out, dump_mask_dir=args.dump_masks)
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    print(f"{args.split}: mean PSNR {mean_psnr:.4f} dB, "
          f"mean SSIM {mean_ssim:.4f} ({len(rows)} frames)")
    return 0


def cmd_ablate(args):
    cfg = _train_config(args)
    table = ablate(Dataset(args.dataset), cfg)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=1, sort_keys=True)
    for mode in ("baseline", "dpd", "full"):
        row = table[mode]
        print(f"{mode:9s} psnr {row['psnr']:.4f} ssim {row['ssim']:.4f}")
    return 0


def cmd_gradcheck(args):
    from .selfcheck import run_gradchecks

    worst = run_gradchecks(seed=args.seed or 0, verbose=True)
    ok = all(err < tol for _, err, tol in worst)
    print("gradcheck " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splatfit",
        description="Articulated splat fitting on perturbed synthetic video")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="scene config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="per-scene optimization")
    p.add_argument("dataset")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--log", help="newline-delimited JSON training log")
    p.add_argument("--out", required=True, help="checkpoint path (.wgta)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a frame from a checkpoint")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--with-bias", action="store_true",
                   help="keep the per-frame bias instead of the clean render")
    p.add_argument("--out", required=True, help=".png or .wgt")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics CSV on a split")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--with-bias", action="store_true")
    p.add_argument("--dump-masks", help="directory for per-frame weight maps")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / +bias / +bias+mask table")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--out", help="JSON table path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference self checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericalAbort, OptimizerError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
