"""Command-line entry point.

    ektm VERB [-c CONFIG] [-o OUT] [--set KEY=VALUE ...] [--seeds N] [--preset NAME]

Verbs: gen, stats, train, eval, grid, ablate, gradcheck, replay.
Machine-readable reports are TSV files in OUT, human summaries go to stdout,
and every run writes OUT/run.json which ``replay`` re-executes.

Exit codes: 0 success, 1 usage/validation/configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from . import __version__
from .config import Config, load_config
from .data import PRESETS, dumps_csv, gen_synthetic, load_csv, preset_schema, split_chrono, stats, stats_tsv
from .diagnostics import loss_gradcheck
from .errors import EKTMError, NumericError
from .model import load_checkpoint, save_checkpoint
from .trainer import evaluate_split, grid_search, grid_tsv, run_ablation, train

VERBS = ("gen", "stats", "train", "eval", "grid", "ablate", "gradcheck", "replay")
GRADCHECK_TOL = 1e-5
GRADCHECK_COORDS = 24  # probed coordinates per parameter tensor


class UsageError(EKTMError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numeric failures here
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="ektm", description="Multi-task CTR/CVR models with explicit knowledge transfer.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("target", nargs="?", help="checkpoint for eval, manifest for replay")
    p.add_argument("-c", "--config", help="JSON config file")
    p.add_argument("-o", "--out", default="out", help="output directory (created if absent)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, default=1, help="seed count for ablate")
    p.add_argument("--preset", choices=sorted(PRESETS) + ["synthetic"])
    p.add_argument("--workers", type=int, default=1, help="parallel processes for grid/ablate")
    p.add_argument("--alphas", default="0.01,0.1,1.0", help="grid: comma-separated alphas")
    p.add_argument("--heads", default="1,2,4,8", help="grid: comma-separated head counts")
    return p


def version_string():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# data plumbing

def load_data(cfg: Config):
    """Dataset named by ``data.*``: a CSV at ``data.path`` or a fresh synthetic draw."""
    preset = cfg["data.preset"]
    if preset == "synthetic":
        syn = cfg.synthetic()
        if cfg["data.path"]:
            return load_csv(cfg["data.path"], syn.schema())
        return gen_synthetic(syn)
    schema = preset_schema(preset)
    if not cfg["data.path"]:
        raise UsageError(f"preset {preset!r} needs data.path pointing at a CSV export")
    return load_csv(cfg["data.path"], schema).with_inferred_vocab()


def load_splits(cfg: Config):
    return split_chrono(load_data(cfg), cfg["data.split"])


# ---------------------------------------------------------------------------
# verbs; each returns {filename: text} of reports

def cmd_gen(cfg, args):
    if cfg["data.preset"] != "synthetic":
        raise UsageError("gen only produces synthetic data (data.preset=synthetic)")
    ds = gen_synthetic(cfg.synthetic())
    rows = stats(ds)
    print(f"generated {len(ds)} rows")
    return {"data.csv": dumps_csv(ds), "stats.tsv": stats_tsv(rows)}


def cmd_stats(cfg, args):
    rows = stats(load_data(cfg))
    text = stats_tsv(rows)
    sys.stdout.write(text)
    return {"stats.tsv": text}


def _metrics_tsv(reports):
    out = "split\ttask\tmetric\tvalue\n"
    for split, rep in reports:
        for line in rep.to_tsv().splitlines()[1:]:
            out += f"{split}\t{line}\n"
    return out


def cmd_train(cfg, args):
    tr, va, te = load_splits(cfg)
    res = train(cfg, tr, va)
    model = res.best_model()
    save_checkpoint(model, Path(args.out) / "model.npz")
    reports = [("valid", evaluate_split(model, va)), ("test", evaluate_split(model, te))]
    print(f"best epoch {res.history.best_epoch}, valid loss {res.history.best_valid_loss:.6f}")
    for t in reports[1][1].tasks:
        if t.auc is not None:
            print(f"test {t.task} auc {t.auc:.4f}")
    return {"history.tsv": res.history.to_tsv(), "metrics.tsv": _metrics_tsv(reports)}


def cmd_eval(cfg, args):
    if not args.target:
        raise UsageError("eval needs a checkpoint path")
    model = load_checkpoint(args.target)
    # data keys come from the command line; model keys from the checkpoint
    _, _, te = load_splits(cfg)
    rep = evaluate_split(model, te, serve=cfg["eval.serve"], strict_ties=cfg["metrics.strict_ties"])
    text = _metrics_tsv([("test", rep)])
    sys.stdout.write(text)
    return {"metrics.tsv": text}


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_grid(cfg, args):
    tr, va, _ = load_splits(cfg)
    alphas, heads = _floats(args.alphas), [int(h) for h in _floats(args.heads)]
    best, rows = grid_search(cfg, alphas, heads, tr, va)
    print(f"best alpha {best['loss.alpha']} heads {best['transfer.heads']} over {len(rows)} runs")
    return {"grid.tsv": grid_tsv(rows), "best.json": best.to_json() + "\n"}


def cmd_ablate(cfg, args):
    tr, va, te = load_splits(cfg)
    table = run_ablation(cfg, tr, va, te, seed_count=args.seeds, workers=args.workers)
    text = table.to_tsv()
    sys.stdout.write(text)
    return {"ablation.tsv": text}


def cmd_gradcheck(cfg, args):
    rows = loss_gradcheck(cfg, seed=cfg["train.seed"], max_coords=GRADCHECK_COORDS)
    worst = max(e for _, e in rows)
    text = "param\tmax_rel_error\n" + "".join(f"{p}\t{e:.3e}\n" for p, e in rows)
    text += f"ALL\t{worst:.3e}\n"
    print(f"grad check over {len(rows)} parameter tensors: max relative error {worst:.3e}")
    if worst > GRADCHECK_TOL:
        exc = NumericError(f"grad check failed: max relative error {worst:.3e} > {GRADCHECK_TOL:g}")
        exc.reports = {"gradcheck.tsv": text}
        raise exc
    return {"gradcheck.tsv": text}


COMMANDS = {"gen": cmd_gen, "stats": cmd_stats, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------------------

def _write(out: Path, reports):
    out.mkdir(parents=True, exist_ok=True)
    for name, text in reports.items():
        (out / name).write_text(text, encoding="utf-8")


def manifest(args, cfg: Config, outputs):
    return {
        "verb": args.verb,
        "target": args.target,
        "config": dict(sorted(cfg.items())),
        "seed": cfg["train.seed"],
        "seeds": args.seeds,
        "alphas": args.alphas,
        "heads": args.heads,
        "version": version_string(),
        "outputs": sorted(outputs),
    }


def _replay_args(path, out):
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    if m.get("verb") not in COMMANDS:
        raise UsageError(f"{path}: manifest has no replayable verb")
    ns = argparse.Namespace(verb=m["verb"], target=m.get("target"), out=out, seeds=m.get("seeds", 1),
                            alphas=m.get("alphas", "0.01,0.1,1.0"), heads=m.get("heads", "1,2,4,8"), workers=1)
    return ns, Config(m["config"])


def run(args) -> int:
    out = Path(args.out)
    if args.verb == "replay":
        if not args.target:
            raise UsageError("replay needs a manifest path")
        args, cfg = _replay_args(args.target, str(out))
    else:
        cfg = load_config(args.config, args.overrides)
        if args.preset:
            cfg.update_from({"data.preset": args.preset})
    if args.verb in ("train", "grid", "ablate"):
        cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    try:
        reports = COMMANDS[args.verb](cfg, args)
    except NumericError as exc:
        partial = getattr(exc, "reports", None) or {}
        _write(out, partial)
        _write(out, {"run.json": json.dumps(manifest(args, cfg, partial), indent=2) + "\n"})
        raise
    _write(out, reports)
    _write(out, {"run.json": json.dumps(manifest(args, cfg, reports), indent=2) + "\n"})
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run(args)
    except NumericError as exc:
        print(f"ektm: numeric failure: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ektm: error: {exc}", file=sys.stderr)
        return 1
    except (EKTMError, OSError) as exc:
        print(f"ektm: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
