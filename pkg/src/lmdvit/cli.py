"""Command-line entry point: gen-data, train, infer, eval and flops.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig
from .errors import ConfigError, FormatError, NumericError, UsageError
from .flops import flops_report, stage_windows
from .metrics import psnr, pruning_precision, ssim_value, weighted_psnr, weighted_ssim, write_metrics_csv
from .model import build, forward, load, pad_input, save
from .train import train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_BETAS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)

log = logging.getLogger("lmdvit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_config(path) -> RunConfig:
    cfg = RunConfig() if path is None else RunConfig.load(path)
    log.info("config %s", cfg.digest())
    return cfg


def _check_beta(beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise UsageError(f"--beta must lie in (0, 1), got {beta}")
    return beta


def _check_s(s: float) -> float:
    if not 0.0 < s <= 1.0:
        raise UsageError(f"--s must lie in (0, 1], got {s}")
    return s


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _run_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    manifest = D.write_dataset(args.out, args.count, seed, cfg.data, split=args.split, force=args.force)
    print(f"wrote {manifest['count']} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args.config)
    examples = D.load_dataset(args.data)
    model = build(cfg.model, cfg.train.seed)
    log_path = args.log or str(Path(args.out_ckpt).with_suffix(".csv"))
    if not examples and cfg.train.steps:
        raise UsageError(f"{args.data}: dataset is empty")
    rows = train(model, examples, cfg.train, log_path=log_path, config_hash=cfg.digest()) \
        if cfg.train.steps else []
    if not rows:
        write_log(log_path, rows, cfg.digest())
    save(model, args.out_ckpt)
    if examples:
        res = forward(model, np.stack([e.blur for e in examples]), "infer")
        ratios = " ".join(f"{r:.3f}" for r in res.kept_ratios())
        print(f"kept-window ratio per stage: {ratios}")
    print(f"config {cfg.digest()} steps {len(rows)} checkpoint {args.out_ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    beta = _check_beta(args.beta)
    s = _check_s(args.s)
    model = load(args.ckpt)
    img = D.read_image(args.input)
    res = forward(model, img, "infer", beta=beta, s=s)
    D.write_image(args.output, res.output.data)
    if args.dump_decisions:
        out_dir = Path(args.dump_decisions)
        out_dir.mkdir(parents=True, exist_ok=True)
        h, w = img.shape[1:]
        ph, pw = res.padded
        for i in range(len(res.keeps)):
            gh, gw = res.grids[i]
            if res.decisions[i] is not None:
                d = res.decisions[i][0]
            else:
                d = np.ones((gh, gw))
            full = np.repeat(np.repeat(d, ph // gh, axis=0), pw // gw, axis=1)[:h, :w]
            D.write_gray(out_dir / f"stage{i}_decision.pgm", full)
    print(" ".join(f"{r:.3f}" for r in res.kept_ratios()))
    return EXIT_OK


def evaluate_sample(model, ex, beta: float, s: float, oracle: bool = False) -> tuple[dict, object]:
    """Metric row for one example; ``oracle`` scores the sharp image against itself."""
    res = forward(model, ex.blur, "infer", beta=beta, s=s)
    out = ex.sharp if oracle else res.output.data
    window = model.config.window_size
    keep = res.window_keep_map(len(res.keeps) - 1, 0)[0]
    row = {
        "sample_id": ex.sample_id,
        "psnr": psnr(out, ex.sharp),
        "ssim": ssim_value(out, ex.sharp),
        "psnr_w": weighted_psnr(out, ex.sharp, ex.mask) if ex.mask.any() else float("nan"),
        "ssim_w": _safe_wssim(out, ex.sharp, ex.mask),
        "precision": pruning_precision(keep, pad_input(ex.mask, model.config.pad_multiple)[0], window),
        "kept_ratio": float(np.mean(res.kept_ratios())),
    }
    return row, res


def _safe_wssim(a, b, m) -> float:
    try:
        return weighted_ssim(a, b, m)
    except UsageError:
        return float("nan")


def _threads() -> int:
    raw = os.environ.get("LMDVIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"LMDVIT_THREADS must be an integer, got {raw!r}") from exc


def run_eval(model, examples, beta: float, s: float, oracle: bool = False):
    """Rows and mean kept counts per stage/block for one (beta, s) setting."""
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda ex: evaluate_sample(model, ex, beta, s, oracle), examples))
    rows = [r for r, _ in results]
    counts = None
    for _, res in results:
        c = res.kept_counts()
        counts = c if counts is None else [[a + b for a, b in zip(x, y)] for x, y in zip(counts, c)]
    if counts is not None:
        counts = [[v / len(results) for v in blk] for blk in counts]
    return rows, counts


def _aggregate(rows) -> dict:
    agg = {"sample_id": "mean"}
    for key in ("psnr", "ssim", "psnr_w", "ssim_w", "precision", "kept_ratio"):
        vals = [r[key] for r in rows if np.isfinite(r[key])]
        agg[key] = float(np.mean(vals)) if vals else float("nan")
    return agg


def cmd_eval(args) -> int:
    model = load(args.ckpt)
    examples = D.load_dataset(args.data, require_masks=True)
    if not examples:
        raise UsageError(f"{args.data}: dataset is empty")
    s = _check_s(args.s)
    report = Path(args.report)
    report.mkdir(parents=True, exist_ok=True)
    h, w = examples[0].blur.shape[1:]
    rows, counts = run_eval(model, examples, _check_beta(args.beta), s, args.oracle)
    write_metrics_csv(report / "metrics.csv", rows + [_aggregate(rows)])
    flops_report(model.config, counts, h, w).write_json(report / "flops.json")
    # a bare --beta-sweep runs the default grid
    sweep_arg = DEFAULT_BETAS if args.beta_sweep == [] else (args.beta_sweep or [])
    betas = [_check_beta(b) for b in sweep_arg]
    if betas:
        sweep = []
        for b in betas:
            b_rows, b_counts = run_eval(model, examples, b, s, args.oracle)
            agg = _aggregate(b_rows)
            rep = flops_report(model.config, b_counts, h, w)
            sweep.append({"beta": b, "kept_ratio": agg["kept_ratio"], "psnr": agg["psnr"],
                          "psnr_w": agg["psnr_w"], "flops": rep.pruned_total, "reduction": rep.reduction})
        with open(report / "beta_sweep.json", "w", encoding="utf-8") as fh:
            json.dump(sweep, fh, indent=2)
    agg = _aggregate(rows)
    print(f"psnr {agg['psnr']:.2f} ssim {agg['ssim']:.4f} psnr_w {agg['psnr_w']:.2f} "
          f"precision {agg['precision']:.3f} kept {agg['kept_ratio']:.3f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.ckpt:
        model_cfg = load(args.ckpt).config
    else:
        model_cfg = _run_config(args.config).model
    kept = None
    if args.keep_ratio is not None:
        if not 0.0 <= args.keep_ratio <= 1.0:
            raise UsageError("--keep-ratio must lie in [0, 1]")
        kept = [
            n * args.keep_ratio if i in model_cfg.prune_stages else n
            for i, n in enumerate(stage_windows(model_cfg, args.height, args.width))
        ]
    rep = flops_report(model_cfg, kept, args.height, args.width)
    if args.out:
        rep.write_json(args.out)
    print(f"dense {rep.dense_total:.4e} pruned {rep.pruned_total:.4e} reduction {rep.reduction:.4f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lmdvit", description="Adaptive window pruning deblurring transformer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", default="train")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="deblur one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--beta", type=float, default=0.5)
    i.add_argument("--s", type=float, default=0.5)
    i.add_argument("--dump-decisions", metavar="DIR")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metrics CSV and FLOPs JSON on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beta", type=float, default=0.5)
    e.add_argument("--s", type=float, default=0.5)
    e.add_argument("--beta-sweep", type=float, nargs="*", metavar="BETA")
    e.add_argument("--oracle", action="store_true", help="score the sharp images against themselves")
    e.add_argument("--report", required=True, metavar="DIR")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytic FLOPs report")
    f.add_argument("--config")
    f.add_argument("--ckpt")
    f.add_argument("--height", type=int, default=64)
    f.add_argument("--width", type=int, default=64)
    f.add_argument("--keep-ratio", type=float)
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if not args.verbose:
            log.setLevel(logging.WARNING)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
