"""Command-line entry point.

    sguda generate    --out data/
    sguda init-train  --out runs/e0
    sguda uda-run     --mode source_guided --clusterer dbscan --p 0.01 --out runs/sg
    sguda sweep       --axis p --values 0.005,0.01,0.015 --out runs/sweep_p
    sguda evaluate    --checkpoint runs/sg/final.ckpt --out runs/eval
    sguda gradcheck   --seed 7
    sguda emit-plot-data runs/sweep_p

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command that
takes ``--out`` writes ``config_resolved.json`` there; passing that file back
through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import evaluation, gradcheck
from .data import generate, load_csv, save_csv
from .encoder import load_checkpoint, save_checkpoint
from .pipeline import (CLUSTERERS, MODES, SWEEP_AXES, PipelineConfig, PipelineError, load_domains, run,
                       sweep, train_init, write_sweep_csv)

DEFAULTS = PipelineConfig()


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


# flag dest -> dotted config path; None in the parsed namespace means "not given"
_FLAGS = {
    "seed": "seed",
    "mode": "mode",
    "clusterer": "clusterer",
    "p": "dbscan.p",
    "min_samples": "dbscan.min_samples",
    "k": "kmeans_k",
    "k1": "rerank.k1",
    "k2": "rerank.k2",
    "lambda_value": "rerank.lambda_value",
    "n_iter": "n_iter",
    "n_epoch": "n_epoch",
    "init_epochs": "init_epochs",
    "init_lr": "init_lr",
    "uda_lr": "uda_lr",
    "weight_decay": "weight_decay",
    "margin": "triplet.margin",
    "shared_depth": "encoder.shared_depth",
    "P": "sampler.P",
    "K": "sampler.K",
    "batches_per_epoch": "sampler.batches_per_epoch",
    "domain_shift": "data.domain_shift",
    "data_seed": "data.seed",
}


def _add_config_flags(ap: argparse.ArgumentParser) -> None:
    d = DEFAULTS
    g = ap.add_argument_group("configuration (defaults shown; flags override --config)")
    g.add_argument("--config", type=Path, help="JSON file with (a subset of) the resolved configuration")
    g.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<command>)")
    g.add_argument("--seed", type=int, help=f"master seed (default {d.seed})")
    g.add_argument("--mode", choices=MODES, help=f"default {d.mode}")
    g.add_argument("--clusterer", choices=CLUSTERERS, help=f"default {d.clusterer}")
    g.add_argument("--p", type=float, help=f"DBSCAN eps fraction (default {d.dbscan.p})")
    g.add_argument("--min-samples", dest="min_samples", type=int, help=f"default {d.dbscan.min_samples}")
    g.add_argument("--k", type=int, help=f"k-means clusters (default {d.kmeans_k})")
    g.add_argument("--k1", type=int, help=f"re-ranking k1 (default {d.rerank.k1})")
    g.add_argument("--k2", type=int, help=f"re-ranking k2 (default {d.rerank.k2})")
    g.add_argument("--lambda", dest="lambda_value", type=float, help=f"default {d.rerank.lambda_value}")
    g.add_argument("--n-iter", dest="n_iter", type=int, help=f"default {d.n_iter}")
    g.add_argument("--n-epoch", dest="n_epoch", type=int, help=f"default {d.n_epoch}")
    g.add_argument("--init-epochs", dest="init_epochs", type=int, help=f"default {d.init_epochs}")
    g.add_argument("--init-lr", dest="init_lr", type=float, help=f"default {d.init_lr}")
    g.add_argument("--uda-lr", dest="uda_lr", type=float, help=f"default {d.uda_lr}")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, help=f"default {d.weight_decay}")
    g.add_argument("--margin", type=float, help=f"triplet margin (default {d.triplet.margin})")
    g.add_argument("--shared-depth", dest="shared_depth", type=int,
                   help=f"shared trunk blocks s (default {d.encoder.shared_depth})")
    g.add_argument("--P", type=int, help=f"identities per batch (default {d.sampler.P})")
    g.add_argument("--K", type=int, help=f"samples per identity (default {d.sampler.K})")
    g.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int,
                   help=f"default {d.sampler.batches_per_epoch}")
    g.add_argument("--domain-shift", dest="domain_shift", type=float,
                   help=f"synthetic shift magnitude (default {d.data.domain_shift})")
    g.add_argument("--data-seed", dest="data_seed", type=int, help=f"default {d.data.seed}")
    g.add_argument("--mean-reduction", action="store_true", default=None,
                   help="average (instead of sum) the losses over the batch")
    g.add_argument("--shared-bn", action="store_true", default=None,
                   help="share batch-norm statistics across domains (ablation)")


def resolve_config(args) -> PipelineConfig:
    """File values first, then explicitly given flags."""
    base = DEFAULTS.to_dict()
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        _merge(base, loaded)
    cfg = PipelineConfig.from_dict(base)
    changes = {path: getattr(args, dest) for dest, path in _FLAGS.items()
               if getattr(args, dest, None) is not None}
    if getattr(args, "mean_reduction", None):
        changes["triplet.reduction"] = "mean"
    if getattr(args, "shared_bn", None):
        changes["encoder.domain_specific_bn"] = False
    return cfg.replace(**changes) if changes else cfg


def _merge(into: dict, new: dict, prefix: str = "") -> None:
    for key, value in new.items():
        if key not in into:
            raise CliError(f"unknown config field {prefix + key!r}")
        if isinstance(into[key], dict) and isinstance(value, dict):
            _merge(into[key], value, prefix + key + ".")
        else:
            into[key] = value


def _out_dir(args, default: str) -> Path:
    out = args.out or Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(cfg: PipelineConfig, out: Path) -> None:
    text = json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
    (out / "config_resolved.json").write_text(text)


# --- commands ----------------------------------------------------------------

def cmd_generate(args, cfg):
    out = _out_dir(args, "data")
    write_resolved(cfg, out)
    dom = generate(cfg.data)
    save_csv(dom.source, out / "source.csv")
    save_csv(dom.target, out / "target.csv")
    print(f"wrote {len(dom.source)} source and {len(dom.target)} target rows to {out}")


def cmd_init_train(args, cfg):
    out = _out_dir(args, "init")
    write_resolved(cfg, out)
    dom = load_domains(cfg)
    init = train_init(dom.source, cfg)
    save_checkpoint(init.encoder, out / "init.ckpt", extra={"head": init.head.weight.data.tolist()})
    with open(out / "init_loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(init.losses):
            w.writerow([e, repr(loss)])
    print(f"final init loss {init.losses[-1] if init.losses else float('nan'):.4f}; wrote {out}")


def cmd_uda_run(args, cfg):
    out = _out_dir(args, "uda")
    write_resolved(cfg, out)
    dom = load_domains(cfg)
    try:
        art = run(cfg, dom.source, dom.target)
    except PipelineError as exc:
        if exc.artifacts is not None:
            exc.artifacts.write(out)
        raise CliError(str(exc)) from exc
    art.write(out)
    print(f"final target mAP {art.final.mAP:.4f} (CMC@1 {art.final.cmc.get(1, float('nan')):.4f}); wrote {out}")


def cmd_sweep(args, cfg):
    out = _out_dir(args, f"sweep_{args.axis}")
    write_resolved(cfg, out)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be a comma-separated list of numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    try:
        table = sweep(cfg, args.axis, values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_sweep_csv(table, out / "sweep.csv")
    for r in table["rows"]:
        print(f"{args.axis}={r['value']}: mAP {r['mAP']:.4f} ({r['status']})")
    print(f"std over values {table['std']:.4f}; wrote {out / 'sweep.csv'}")


def cmd_evaluate(args, cfg):
    out = _out_dir(args, "eval")
    write_resolved(cfg, out)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    if args.data is not None:
        target = load_csv(args.data / "target.csv")
    else:
        target = load_domains(cfg).target
    domain = "target" if hasattr(model, "heads") else "source"
    rep = evaluation.evaluate(target.select("query"), target.select("gallery"), model, cfg.protocol, domain)
    rep.fingerprint = evaluation.fingerprint(cfg.to_dict())
    rep.seed = cfg.seed
    (out / "report.json").write_text(rep.to_json())
    print(f"mAP {rep.mAP:.4f} CMC@1 {rep.cmc.get(1, float('nan')):.4f}; wrote {out / 'report.json'}")


def cmd_gradcheck(args, cfg):
    if not gradcheck.main(seed=cfg.seed):
        raise CliError("gradient check failed")


def emit_plot_data(run_dir: Path) -> Path:
    """Write ``map_vs_axis.csv`` from a sweep or a single-run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise CliError(f"missing run directory {run_dir}")
    sweep_csv = run_dir / "sweep.csv"
    rows = []
    if sweep_csv.exists():
        with open(sweep_csv, newline="") as f:
            for r in csv.DictReader(f):
                rows.append([r["axis"], r["value"], r["mAP"], r["cmc1"], r["std"]])
    else:
        reports = sorted(run_dir.glob("report_iter*.json"), key=lambda p: int(p.stem[len("report_iter"):]))
        if not reports:
            raise CliError(f"missing sweep.csv or report_iter*.json in {run_dir}")
        for path in reports:
            rep = json.loads(path.read_text())
            rows.append(["iteration", path.stem[len("report_iter"):], repr(rep["mAP"]),
                         repr(rep["cmc"].get("1", float("nan"))), ""])
    out = run_dir / "map_vs_axis.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["axis", "value", "mAP", "cmc1", "std"])
        w.writerows(rows)
    return out


def cmd_emit_plot_data(args, cfg):
    out = emit_plot_data(args.run_dir)
    print(f"wrote {out}")


# --- parsing -----------------------------------------------------------------

class UsageError(Exception):
    """Bad invocation reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sguda", description="Source-guided pseudo-labelling for re-ID domain adaptation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    specs = {
        "generate": (cmd_generate, "write the synthetic source/target datasets as CSV"),
        "init-train": (cmd_init_train, "train the source-only encoder E0"),
        "uda-run": (cmd_uda_run, "run the alternating pseudo-label adaptation"),
        "sweep": (cmd_sweep, "run one adaptation per value of an axis"),
        "evaluate": (cmd_evaluate, "evaluate a checkpoint on the target query/gallery"),
        "gradcheck": (cmd_gradcheck, "finite-difference check of every analytic gradient"),
    }
    for name, (fn, help_) in specs.items():
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "sweep":
            p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
            p.add_argument("--values", required=True, help="comma-separated axis values")
        if name == "evaluate":
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--data", type=Path, help="directory with target.csv (default: regenerate)")
    p = sub.add_parser("emit-plot-data", help="write map_vs_axis.csv for a run directory")
    p.add_argument("run_dir", type=Path)
    p.set_defaults(func=cmd_emit_plot_data, config=None)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args) if args.command != "emit-plot-data" else DEFAULTS
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ValueError, KeyError, CliError) as exc:
        # invalid values only surface when the config is validated
        print(f"sguda: error: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except UsageError as exc:
        print(f"sguda: error: {exc}", file=sys.stderr)
        return 2
    except (CliError, PipelineError, OSError, ValueError) as exc:
        print(f"sguda: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
