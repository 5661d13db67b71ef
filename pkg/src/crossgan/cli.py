"""Command line entry point: ``crossgan {gen-data,train,infer,eval}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .evaluation import ComparisonTable, compare_models, side_by_side, stereo_consistency_error
from .trainer import NonFiniteLossError, TrainState, run_curriculum, stereo_translator, translate

log = logging.getLogger("crossgan")

SPLITS = ("trainX", "trainY", "testX", "testY")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-domain stereo dataset")
    _common(g)
    g.add_argument("--n", type=int, default=20, help="stereo pairs per domain per split")
    g.add_argument("--n-mono", type=int, help="monoscopic images per domain (default: --n)")
    g.add_argument("--size", type=_size, default=(64, 128))
    g.add_argument("--max-disparity", type=int, default=8)

    t = sub.add_parser("train", help="run the mono -> stereo curriculum")
    _common(t)
    t.add_argument("--mode", choices=("stereo", "mono", "baseline"))
    t.add_argument("--epochs-mono", type=int)
    t.add_argument("--epochs-stereo", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-cycle", type=float)
    t.add_argument("--buffer-capacity", type=int)
    t.add_argument("--base-filters", type=int)
    t.add_argument("--residual-blocks", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--crop", type=_size)
    t.add_argument("--mono-root", type=str)
    t.add_argument("--stereo-root", type=str)
    t.add_argument("--resume", type=Path)
    t.add_argument("--data", type=Path, help="gen-data output dir (sets both roots)")

    i = sub.add_parser("infer", help="translate a directory of images")
    _common(i)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True)
    i.add_argument("--mode", choices=("stereo", "mono", "baseline"))
    i.add_argument("--condition", type=Path, help="condition image (pins y_W)")
    i.add_argument("--condition-dir", type=Path, help="draw y_W from this directory using --seed")

    e = sub.add_parser("eval", help="stereo-consistency reports and model comparison")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--checkpoint-b", type=Path)
    e.add_argument("--test", type=Path, required=True, help="stereo test split (left/right[/disparity])")
    e.add_argument("--conditions", type=Path, help="target-domain images for y_W (default: ../testY/left)")
    e.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    e.add_argument("--grids", action="store_true", help="write side-by-side image grids")
    return parser


def _config(args, overrides: dict) -> RunConfig:
    overrides = dict(overrides)
    if getattr(args, "seed", None) is not None:
        overrides["training.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, overrides)


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out_dir:
        raise ConfigError(["out_dir: required (--out or config)"])
    return Path(cfg.out_dir)


# -- gen-data ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    h, w = args.size
    errors = []
    if args.n < 1:
        errors.append("--n must be >= 1")
    if h % 4 or w % 4 or h < 32 or w < 32:
        errors.append(f"--size {h}x{w}: dims must be divisible by 4 and >= 32")
    if not 0 <= args.max_disparity < w / 8:
        errors.append(f"--max-disparity must satisfy 0 <= d < W/8 = {w / 8}")
    seed = args.seed if args.seed is not None else 0
    if args.out is None:
        errors.append("--out is required")
    if errors:
        raise ConfigError(errors)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    n_mono = args.n_mono if args.n_mono is not None else args.n
    for k, split in enumerate(SPLITS):
        prefix, dom = split[:-1], split[-1]
        ds = D.synth_generate(args.n, dom, (h, w), args.max_disparity, seed=[seed, k], prefix=prefix)
        D.save_dataset(ds, out / "stereo" / split)
    for k, split in enumerate(("trainX", "trainY")):
        ds = D.synth_generate(n_mono, split[-1], (h, w), args.max_disparity, seed=[seed, 10 + k], prefix="mono")
        D.save_dataset(ds.left_view(), out / "mono" / split)
    manifest = {"seed": seed, "n": args.n, "n_mono": n_mono, "size": [h, w], "max_disparity": args.max_disparity,
                "stereo_splits": list(SPLITS), "mono_splits": ["trainX", "trainY"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote synthetic dataset to %s", out)
    return 0


# -- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    ov = {"training.mode": args.mode, "training.epochs_mono": args.epochs_mono,
          "training.epochs_stereo": args.epochs_stereo, "training.lr": args.lr,
          "training.lambda_cycle": args.lambda_cycle, "training.buffer_capacity": args.buffer_capacity,
          "training.base_filters": args.base_filters, "training.residual_blocks": args.residual_blocks,
          "training.checkpoint_every": args.checkpoint_every,
          "data.mono_root": args.mono_root, "data.stereo_root": args.stereo_root}
    if args.data is not None:
        ov["data.mono_root"] = ov["data.mono_root"] or str(args.data / "mono")
        ov["data.stereo_root"] = ov["data.stereo_root"] or str(args.data / "stereo")
    if args.crop is not None:
        ov["augment.crop_height"], ov["augment.crop_width"] = args.crop
    cfg = _config(args, ov)
    out = _require_out(cfg)
    tc = cfg.training
    errors = []
    if tc.epochs_mono and not cfg.data.mono_root:
        errors.append("data.mono_root: required when epochs_mono > 0")
    if tc.epochs_stereo and not cfg.data.stereo_root:
        errors.append("data.stereo_root: required when epochs_stereo > 0")
    if errors:
        raise ConfigError(errors)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")

    mono_x = mono_y = stereo_x = stereo_y = None
    if tc.epochs_mono:
        root = Path(cfg.data.mono_root)
        mono_x, mono_y = D.load_dataset(root / "trainX", "mono", "X"), D.load_dataset(root / "trainY", "mono", "Y")
    if tc.epochs_stereo:
        root = Path(cfg.data.stereo_root)
        stereo_x = D.load_dataset(root / "trainX", "stereo", "X")
        stereo_y = D.load_dataset(root / "trainY", "stereo", "Y")
    state = run_curriculum(tc, mono_x, mono_y, stereo_x, stereo_y, cfg.augment, out_dir=out, resume=args.resume,
                           on_step=lambda r: log.debug(r.to_json()))
    log.info("finished %d steps; checkpoint %s", state.step, out / "final.pt")
    return 0


# -- infer ------------------------------------------------------------------

def _pick_condition(args, seed: int) -> tuple[np.ndarray, str]:
    if args.condition is not None:
        return D.read_image(args.condition), str(args.condition)
    if args.condition_dir is None:
        raise ConfigError(["infer: --condition or --condition-dir is required for conditional models"])
    files = sorted(p for p in args.condition_dir.iterdir() if p.suffix.lower() in D.IMAGE_SUFFIXES)
    if not files:
        raise ConfigError([f"{args.condition_dir}: no images"])
    path = files[int(np.random.default_rng(seed).integers(len(files)))]
    return D.read_image(path), str(path)


def cmd_infer(args) -> int:
    if args.out is None:
        raise ConfigError(["--out is required"])
    state = TrainState.from_checkpoint(args.checkpoint)
    mode = args.mode or state.cfg.mode
    if (mode == "baseline") != (state.cfg.mode == "baseline"):
        raise ConfigError([f"mode {mode!r} does not match checkpoint mode {state.cfg.mode!r}"])
    seed = args.seed if args.seed is not None else 0
    cond, cond_name = (None, None) if mode == "baseline" else _pick_condition(args, seed)
    stereo = mode in ("stereo", "baseline") and (args.input / "left").is_dir()
    if mode == "stereo" and not stereo:
        raise ConfigError([f"{args.input}: stereo mode needs left/ and right/ subdirectories"])
    out = args.out
    if stereo:
        ds = D.load_dataset(args.input, "stereo", "X")
        (out / "left").mkdir(parents=True, exist_ok=True)
        (out / "right").mkdir(parents=True, exist_ok=True)
        for stem, pair in zip(ds.stems, ds.samples):
            l, r = translate(state, pair.left, pair.right, cond, mode)
            D.write_image(out / "left" / f"{stem}.png", l)
            D.write_image(out / "right" / f"{stem}.png", r)
    else:
        ds = D.load_dataset(args.input, "mono", "X")
        out.mkdir(parents=True, exist_ok=True)
        for stem, img in zip(ds.stems, ds.samples):
            D.write_image(out / f"{stem}.png", translate(state, img, None, cond, "mono" if mode != "baseline" else mode))
    (out / "infer_log.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "mode": mode, "condition": cond_name, "seed": seed,
         "frames": len(ds)}, indent=2) + "\n")
    return 0


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _config(args, {})
    out = _require_out(cfg)
    test = D.load_dataset(args.test, "stereo", "X")
    cond_dir = args.conditions or (args.test.parent / "testY" / "left")
    conditions = D.load_dataset(cond_dir, "mono", "Y").samples
    state_a = TrainState.from_checkpoint(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    tr_a = stereo_translator(state_a)
    if args.checkpoint_b is None:
        rng = np.random.default_rng(args.seeds[0])
        outputs = [tr_a(p, conditions[int(rng.integers(len(conditions)))]) for p in test.samples]
        for p, s in zip(test.samples, test.stems):
            p.scene_id = s
        report = stereo_consistency_error(test.samples, outputs, cfg.eval)
        (out / "consistency.csv").write_text(report.to_csv())
        (out / "summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
        if args.grids:
            _grids(out, test, [outputs])
        if report.unreliable:
            log.warning("unreliable frames (valid fraction < %.2f): %s", cfg.eval.min_valid_fraction,
                        report.unreliable)
        return 0
    state_b = TrainState.from_checkpoint(args.checkpoint_b)
    tr_b = stereo_translator(state_b)
    table: ComparisonTable = compare_models(test.samples, tr_a, tr_b, args.seeds, conditions, cfg.eval, test.stems)
    (out / "comparison.csv").write_text(table.to_csv())
    summary = table.summary()
    summary.update(model_a=str(args.checkpoint), model_b=str(args.checkpoint_b))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if args.grids:
        rng = np.random.default_rng(args.seeds[0])
        conds = [conditions[int(rng.integers(len(conditions)))] for _ in test.samples]
        _grids(out, test, [[tr_b(p, c) for p, c in zip(test.samples, conds)],
                           [tr_a(p, c) for p, c in zip(test.samples, conds)]])
    return 0


def _grids(out: Path, test, output_sets) -> None:
    gdir = out / "grids"
    gdir.mkdir(exist_ok=True)
    for k, (stem, pair) in enumerate(zip(test.stems, test.samples)):
        rows = [[pair.left] + [o[k].left for o in output_sets], [pair.right] + [o[k].right for o in output_sets]]
        D.write_image(gdir / f"{stem}.png", side_by_side(rows))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except NonFiniteLossError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
