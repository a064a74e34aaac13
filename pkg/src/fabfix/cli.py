"""Command-line front end.

    fabfix gen-data        --config C --out DATA
    fabfix train-forward   --config C --data DATA --out MODELS/forward
    fabfix train-corrector --config C --data DATA --forward MODELS/forward --out MODELS/corrector
    fabfix predict         --layout L.pgm --forward MODELS/forward --out OUT
    fabfix correct         --layout L.pgm --corrector MODELS/corrector --out OUT
    fabfix evaluate        --nominal N.pgm --candidate X.pgm --out OUT

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
format error, 4 training divergence. Failures print one JSON line on
stderr: {"error": <type>, "exit": <code>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__, metrics, training
from .correct import InferenceParams, correct_layout, predict_layout
from .errors import (FabfixError, FormatError, GenerationError, ParameterError,
                     ShapeError, TrainingError)
from .fabsim import FabParams
from .patterns import PatternSpec, generate_pattern
from .raster import read_pgm, write_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(FabfixError):
    pass


@dataclass
class RunConfig:
    pattern: PatternSpec = field(default_factory=PatternSpec)
    n_patterns: int = 30
    fab: FabParams = field(default_factory=FabParams)
    fab_runs: int = 1
    split_seed: int = 0
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    inference: InferenceParams = field(default_factory=InferenceParams)
    paths: dict = field(default_factory=lambda: {"data_dir": "data", "model_dir": "models",
                                                 "output_dir": "out"})
    nm_per_pixel: float | None = None

    _SECTIONS = {"pattern": PatternSpec, "fab": FabParams,
                 "train": training.TrainConfig, "inference": InferenceParams}

    def to_dict(self):
        d = {}
        for key in ("pattern", "n_patterns", "fab", "fab_runs", "split_seed", "train",
                    "inference", "paths", "nm_per_pixel"):
            v = getattr(self, key)
            d[key] = v.to_dict() if hasattr(v, "to_dict") else v
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"pattern", "n_patterns", "fab", "fab_runs", "split_seed", "train",
                 "inference", "paths", "nm_per_pixel"}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for key, value in d.items():
            section = cls._SECTIONS.get(key)
            if section is not None:
                try:
                    kw[key] = section.from_dict(value)
                except TypeError as exc:
                    raise ParameterError(f"config section {key!r}: {exc}") from None
            elif key == "paths":
                kw[key] = {**cls().paths, **value}
            else:
                kw[key] = value
        cfg = cls(**kw)
        if cfg.n_patterns < 1 or cfg.fab_runs < 1:
            raise ParameterError("n_patterns and fab_runs must be >= 1")
        return cfg


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(raw)


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(obj, **changes) if changes else obj


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- data -----------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    cfg.pattern = _override(cfg.pattern, seed=args.seed, width=args.width, height=args.height)
    cfg.n_patterns = args.n_patterns or cfg.n_patterns
    out = args.out or cfg.paths["data_dir"]
    os.makedirs(out, exist_ok=True)
    corpus = [generate_pattern(replace(cfg.pattern, seed=cfg.pattern.seed + i))
              for i in range(cfg.n_patterns)]
    ds = training.build_dataset(corpus, cfg.fab, cfg.train.stride, cfg.split_seed,
                                cfg.fab_runs)
    rasters = []
    for r, (lay, fab) in enumerate(zip(ds.layouts, ds.fabricated)):
        i, run = r % len(corpus), r // len(corpus)
        lay_name = f"layout_{i:03d}.pgm"
        fab_name = f"fabricated_{i:03d}_run{run}.pgm"
        if run == 0:
            write_pgm(lay, os.path.join(out, lay_name))
        write_pgm(fab, os.path.join(out, fab_name))
        rasters.append({"layout": lay_name, "fabricated": fab_name})
    manifest = {
        "config": cfg.to_dict(),
        "patch_size": ds.patch_size,
        "stride": cfg.train.stride,
        "rasters": rasters,
        "n_pairs": len(ds),
        "n_train": int(ds.split.sum()),
        "n_test": int((~ds.split).sum()),
        "pairs": [[int(r), int(y), int(x), "train" if s else "test"]
                  for (r, y, x), s in zip(ds.index, ds.split)],
    }
    _dump_json(os.path.join(out, "manifest.json"), manifest)
    print(f"gen-data: {cfg.n_patterns} patterns, {len(ds)} pairs "
          f"({manifest['n_train']} train / {manifest['n_test']} test) -> {out}")


def load_data_dir(path):
    """Dataset described by a gen-data manifest."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"{mpath} does not exist")
    with open(mpath, encoding="utf-8") as fh:
        try:
            m = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    layouts = [read_pgm(os.path.join(path, r["layout"])) for r in m["rasters"]]
    fabricated = [read_pgm(os.path.join(path, r["fabricated"])) for r in m["rasters"]]
    pairs = m["pairs"]
    index = np.array([p[:3] for p in pairs], dtype=np.int64).reshape(-1, 3)
    split = np.array([p[3] == "train" for p in pairs], dtype=bool)
    p = m["patch_size"]
    for r, y, x in index:
        if not (0 <= r < len(layouts)) or y + p > layouts[r].shape[0] or x + p > layouts[r].shape[1]:
            raise FormatError(f"{mpath}: pair ({r}, {y}, {x}) lies outside its raster")
    return training.Dataset(layouts, fabricated, index, split, p,
                            {"stride": m["stride"], "source": os.path.basename(path)})


# -- training -------------------------------------------------------------------

def _train_overrides(args, cfg):
    return _override(cfg.train, max_epochs=args.max_epochs, ensemble_size=args.ensemble_size,
                     seed=args.seed, batch_size=args.batch_size, patience=args.patience)


def _progress(row):
    print(f"  member {row['member']} epoch {row['epoch']}: train {row['train_bce']:.4f} "
          f"test {row['test_bce']:.4f}", flush=True)


def _finish_training(ens, out, label):
    training.save_ensemble(ens, out)
    training.write_history(os.path.join(out, "history.csv"), ens)
    best = ", ".join(f"{m.meta['test_bce']:.4f}" for m in ens.members)
    print(f"{label}: {len(ens)} member(s), best test BCE [{best}] -> {out}")


def cmd_train_forward(args, cfg):
    ds = load_data_dir(args.data or cfg.paths["data_dir"])
    tc = _train_overrides(args, cfg)
    out = args.out or os.path.join(cfg.paths["model_dir"], "forward")
    ens = training.train_ensemble(training.train_forward, ds, tc,
                                  log=None if args.quiet else _progress)
    _finish_training(ens, out, "train-forward")


def cmd_train_corrector(args, cfg):
    ds = load_data_dir(args.data or cfg.paths["data_dir"])
    tc = _train_overrides(args, cfg)
    out = args.out or os.path.join(cfg.paths["model_dir"], "corrector")
    log = None if args.quiet else _progress
    if args.mode == "tandem":
        fwd_dir = args.forward or os.path.join(cfg.paths["model_dir"], "forward")
        forward = training.load_ensemble(fwd_dir)
        ens = training.train_ensemble(training.train_inverse_tandem, ds, tc,
                                      forward=forward, log=log)
    else:
        ens = training.train_ensemble(training.train_inverse_independent, ds, tc, log=log)
    _finish_training(ens, out, f"train-corrector ({args.mode})")


# -- inference ------------------------------------------------------------------

def _inference_params(args, cfg):
    return _override(cfg.inference, stride=args.stride, binarize_threshold=args.threshold)


def _infer(args, cfg, fn, model_dir, stem):
    params = _inference_params(args, cfg)
    layout = read_pgm(args.layout)
    ens = training.load_ensemble(model_dir)
    bitmap, fld = fn(layout, ens, params)
    out = args.out or cfg.paths["output_dir"]
    os.makedirs(out, exist_ok=True)
    write_pgm(fld, os.path.join(out, f"{stem}_field.pgm"))
    write_pgm(bitmap, os.path.join(out, f"{stem}.pgm"))
    print(f"{stem}: {layout.shape[1]}x{layout.shape[0]} at stride {params.stride} -> {out}")


def cmd_predict(args, cfg):
    _infer(args, cfg, predict_layout,
           args.forward or os.path.join(cfg.paths["model_dir"], "forward"), "prediction")


def cmd_correct(args, cfg):
    _infer(args, cfg, correct_layout,
           args.corrector or os.path.join(cfg.paths["model_dir"], "corrector"), "correction")


def _count_pair(text):
    try:
        u, c = text.split(":")
        return int(u), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected UNCORRECTED:CORRECTED counts, got {text!r}")


def cmd_evaluate(args, cfg):
    out = args.out or cfg.paths["output_dir"]
    rows = []
    summary = {}
    if args.nominal or args.candidate:
        if not (args.nominal and args.candidate):
            raise UsageError("--nominal and --candidate must be given together")
        nominal, candidate = read_pgm(args.nominal), read_pgm(args.candidate)
        e = metrics.error_pixels(nominal, candidate)
        dm = metrics.diff_map(nominal, candidate)
        summary = {"error_pixels": e, **dm.counts()}
        os.makedirs(out, exist_ok=True)
        dm.write_ppm(os.path.join(out, "diff.ppm"))
        if args.uncorrected:
            e_u = metrics.error_pixels(nominal, read_pgm(args.uncorrected))
            rows.append(metrics.reduction_row("candidate", e_u, e))
            summary["error_pixels_uncorrected"] = e_u
    for i, (u, c) in enumerate(args.counts or []):
        rows.append(metrics.reduction_row(f"counts_{i}", u, c))
    if not summary and not rows:
        raise UsageError("nothing to evaluate: give --nominal/--candidate or --counts")
    os.makedirs(out, exist_ok=True)
    if summary:
        metrics.write_csv(os.path.join(out, "errors.csv"), [summary])
        print("evaluate: " + " ".join(f"{k}={v}" for k, v in summary.items()))
    if rows:
        metrics.write_csv(os.path.join(out, "reduction.csv"), rows, metrics.RESULT_COLUMNS)
        for r in rows:
            print(f"evaluate: {r['name']} {r['error_uncorrected']}/{r['error_corrected']} "
                  f"reduction {r['reduction_factor']}")


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="fabfix", description="Learned fabrication prediction and correction.")
    p.add_argument("--version", action="version", version=f"fabfix {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("gen-data", help="generate patterns and fabricated rasters"))
    g.add_argument("--n-patterns", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)

    for name in ("train-forward", "train-corrector"):
        t = common(sub.add_parser(name))
        t.add_argument("--data", help="gen-data output directory")
        t.add_argument("--max-epochs", type=int)
        t.add_argument("--ensemble-size", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--patience", type=int)
        t.add_argument("--quiet", action="store_true")
        if name == "train-corrector":
            t.add_argument("--forward", help="forward ensemble directory (tandem mode)")
            t.add_argument("--mode", choices=("tandem", "independent"), default="tandem")

    for name, model in (("predict", "--forward"), ("correct", "--corrector")):
        c = common(sub.add_parser(name))
        c.add_argument("--layout", required=True, help="layout PGM")
        c.add_argument(model, help="ensemble directory")
        c.add_argument("--stride", type=int)
        c.add_argument("--threshold", type=float)

    e = common(sub.add_parser("evaluate"))
    e.add_argument("--nominal")
    e.add_argument("--candidate")
    e.add_argument("--uncorrected", help="uncorrected outcome PGM for a reduction row")
    e.add_argument("--counts", type=_count_pair, action="append",
                   help="extra reduction row from UNCORRECTED:CORRECTED counts")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-forward": cmd_train_forward,
            "train-corrector": cmd_train_corrector, "predict": cmd_predict,
            "correct": cmd_correct, "evaluate": cmd_evaluate}


def _fail(exc, code):
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}),
          file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ParameterError) as exc:
        return _fail(exc, EXIT_USAGE)
    except TrainingError as exc:
        return _fail(exc, EXIT_DIVERGED)
    except (FormatError, ShapeError, GenerationError, FabfixError, OSError,
            KeyError, json.JSONDecodeError) as exc:
        return _fail(exc, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
