"""Command-line entry point: ``befunet <command> ...``.

Exit codes: 0 success, 1 runtime failure (I/O, divergence, failed checks),
2 usage or configuration error. Errors are reported on one stderr line.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .autograd import make_rng
from .checkpoint import load_checkpoint
from .checks import SUITES, run_suites
from .config import RunConfig, defaults, load
from .data import FormatError, generate_synthetic, load_manifest, read_image, save_dataset, split_samples, write_mask
from .grid import ConfigError
from .lcaf import attention_cost, attention_cost_terms
from .losses import LossWeights
from .metrics import MetricTable, evaluate_dataset
from .model import BEFUnet
from .train import EpochRecord, TrainingDiverged, fit

METRICS_HEADER = "epoch,split,loss,dice"


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


# -- training ---------------------------------------------------------------------------

def load_datasets(cfg: RunConfig, config_dir: Path | None = None):
    """Train/val samples from the manifests, or a synthetic corpus when none is given."""
    base = config_dir or Path(".")
    if cfg.train_manifest:
        train = load_manifest(base / cfg.train_manifest)
        if cfg.val_manifest:
            return train, load_manifest(base / cfg.val_manifest)
        return split_samples(train, cfg.val_fraction)
    H, W = cfg.model.image_size
    samples = generate_synthetic(cfg.synthetic_samples, H, W, cfg.model.num_classes, cfg.seed)
    return split_samples(samples, cfg.val_fraction)


def check_compatible(model_cfg, samples, what: str) -> None:
    k = model_cfg.num_classes
    for i, s in enumerate(samples):
        if s.image.shape[:2] != tuple(model_cfg.image_size):
            raise ConfigError(f"{what} sample {i}: image {s.image.shape[:2]} does not match "
                              f"model input {tuple(model_cfg.image_size)}")
        if s.mask.max() >= k:
            raise ConfigError(f"{what} sample {i}: mask has class {int(s.mask.max())} "
                              f"but the model predicts {k} classes")


def run_training(cfg: RunConfig, out_dir: Path, config_dir: Path | None = None, echo=print) -> list[EpochRecord]:
    """Train per ``cfg``; writes ``config.txt``, ``metrics.csv`` and ``best.befu`` into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = load_datasets(cfg, config_dir)
    check_compatible(cfg.model, train, "train")
    check_compatible(cfg.model, val, "val")
    (out_dir / "config.txt").write_text(cfg.serialize(), encoding="utf-8")
    model = BEFUnet(cfg.model, make_rng(cfg.seed)).astype(np.dtype(cfg.dtype))
    metrics = out_dir / "metrics.csv"
    metrics.write_text(METRICS_HEADER + "\n", encoding="utf-8")

    def log(rec: EpochRecord):
        with metrics.open("a", encoding="utf-8") as f:
            f.write(rec.csv() + "\n")
        echo(rec.csv())

    return fit(model, train, val, cfg.settings(), LossWeights.from_config(cfg.model), out_dir / "best.befu", log)


def cmd_train(args) -> int:
    cfg = load(args.config) if args.config else defaults(args.profile)
    out = Path(args.out or cfg.out_dir)
    config_dir = Path(args.config).parent if args.config else None
    start = time.perf_counter()
    history = run_training(cfg, out, config_dir)
    val = [r for r in history if r.split == "val"]
    if val:
        best = max(val, key=lambda r: r.dice)
        print(f"best val dice {best.dice:.4f} at epoch {best.epoch}; {time.perf_counter() - start:.0f}s; "
              f"checkpoint {out / 'best.befu'}")
    return 0


# -- evaluation and inference ---------------------------------------------------------

def evaluate_checkpoint(checkpoint, manifest, batch_size: int = 8) -> MetricTable:
    model = load_checkpoint(checkpoint)
    samples = load_manifest(manifest)
    check_compatible(model.cfg, samples, "eval")
    return evaluate_dataset(model.predict, samples, model.cfg.num_classes, batch_size)


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.manifest, args.batch_size).report()
    print(report.rstrip("\n"))
    if args.out:
        Path(args.out).write_text(report + "\n", encoding="utf-8")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        img = read_image(path)
        if img.shape[-1] == 1:
            img = np.repeat(img, 3, axis=-1)
        if img.shape[:2] != tuple(model.cfg.image_size):
            raise ConfigError(f"{path}: image {img.shape[:2]} does not match model input "
                              f"{tuple(model.cfg.image_size)}")
        target = out / (Path(path).stem + "_pred.pgm")
        write_mask(target, model.predict(img[None])[0])
        print(target)
    return 0


# -- checks and arithmetic ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    names = list(SUITES) if args.module == "all" else [args.module]
    failed = 0
    for label, res in run_suites(names, args.eps, args.tol):
        status = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        print(f"{status} {label} max_rel_error={res.max_rel_error:.3e}")
        if not res.passed:
            for line in res.failures[:5]:
                print(f"    {line}")
    print(f"{'FAILED' if failed else 'OK'}: {failed} failing check(s)")
    return 1 if failed else 0


def format_flops(h: int, w: int, c: int, hl: int, wl: int, verbose: bool = False) -> str:
    gca, lca = attention_cost(h, w, c, hl, wl)
    lines = [f"gca={gca} lca={lca} ratio={round(gca / lca, 6)}"]
    if verbose:
        t = attention_cost_terms(h, w, c, hl, wl)
        lines.append(f"gca: projection={t['projection']} attention={t['gca_attention']}")
        lines.append(f"lca: projection={t['projection']} attention={t['lca_attention']}")
    return "\n".join(lines)


def cmd_flops(args) -> int:
    print(format_flops(args.h, args.w, args.c, args.hl, args.wl, args.verbose))
    return 0


def cmd_gen_data(args) -> int:
    H, W = args.size
    samples = generate_synthetic(args.n, H, W, args.classes, args.seed, fractional=args.fractional)
    train, val = split_samples(samples, args.val_fraction)
    for split, part in (("train", train), ("val", val)):
        if part:
            print(save_dataset(part, args.out, split, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="befunet", description="Edge/body fusion segmentation network")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="flat key = value config file (default: profile defaults)")
    t.add_argument("--profile", choices=["desk", "paper"], default="desk", help="used without --config")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="also write the report here")
    e.add_argument("--batch-size", type=_positive_int, default=8)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="write predicted masks for PPM images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("images", nargs="+")
    i.set_defaults(fn=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", default="all", choices=["all", *SUITES])
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=cmd_gradcheck)

    f = sub.add_parser("flops", help="global vs local cross-attention multiply-adds")
    for name in ("h", "w", "c", "hl", "wl"):
        f.add_argument(f"--{name}", type=_positive_int, required=True)
    f.add_argument("--verbose", action="store_true", help="show the projection/attention split")
    f.set_defaults(fn=cmd_flops)

    d = sub.add_parser("gen-data", help="write a synthetic PPM/PGM corpus with manifests")
    d.add_argument("--out", required=True)
    d.add_argument("--n", type=_positive_int, default=200)
    d.add_argument("--size", type=_positive_int, nargs=2, default=[64, 64], metavar=("H", "W"))
    d.add_argument("--classes", type=int, default=3)
    d.add_argument("--seed", type=int, default=42)
    d.add_argument("--val-fraction", type=float, default=0.2)
    d.add_argument("--fractional", action="store_true", help="average jittered boundaries for soft edge targets")
    d.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # last resort: one line, no traceback
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
