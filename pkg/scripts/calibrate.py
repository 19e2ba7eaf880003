"""Measure the comparative claims on the synthetic benchmark over several seeds.

Prints one JSON line per seed with the final target mAP of:
  SO   source_only (no adaptation)
  TO   target_only pseudo-labelling (shared_depth 0)
  SG   source_guided (configured shared_depth)
  SGsh source_guided with batch-norm statistics shared across domains
and, with --p-values, the per-p mAPs and their standard deviation for TO and SG.

    python scripts/calibrate.py --seeds 0,1,2,3,4 --set n_epoch=5 --p-values 0.005,0.0075,0.01,0.0125,0.015
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from sguda.pipeline import PipelineConfig, PipelineError, run, sweep, train_init
from sguda.data import generate


def parse_set(items):
    out = {}
    for item in items or []:
        key, value = item.split("=", 1)
        out[key] = json.loads(value)
    return out


def final_map(cfg, dom, init):
    try:
        return run(cfg, dom.source, dom.target, init=init).final.mAP
    except PipelineError as exc:
        print("  aborted:", exc)
        return float("nan")


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--set", action="append", help="dotted.config.path=json_value")
    ap.add_argument("--p-values", default="")
    ap.add_argument("--skip", default="", help="comma list of SO,TO,SG,SGsh to skip")
    args = ap.parse_args(argv)
    overrides = parse_set(args.set)
    skip = set(filter(None, args.skip.split(",")))
    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        t0 = time.time()
        cfg = PipelineConfig().replace(**{"seed": seed, "data.seed": seed, **overrides})
        dom = generate(cfg.data)
        init = train_init(dom.source, cfg)
        row = {"seed": seed}
        to_cfg = cfg.replace(mode="target_only", **{"encoder.shared_depth": 0})
        if "SO" not in skip:
            row["SO"] = final_map(cfg.replace(mode="source_only"), dom, init)
        if "TO" not in skip:
            row["TO"] = final_map(to_cfg, dom, init)
        if "SG" not in skip:
            row["SG"] = final_map(cfg, dom, init)
        if "SGsh" not in skip:
            sh = cfg.replace(**{"encoder.domain_specific_bn": False})
            row["SGsh"] = final_map(sh, dom, train_init(dom.source, sh))
        if args.p_values:
            ps = [float(v) for v in args.p_values.split(",")]
            for name, c in (("TO", to_cfg), ("SG", cfg)):
                table = sweep(c, "p", ps, domains=dom, init=init)
                row[f"{name}_p"] = [round(r["mAP"], 4) for r in table["rows"]]
                row[f"{name}_std"] = table["std"]
        row["secs"] = round(time.time() - t0, 1)
        rows.append(row)
        print(json.dumps({k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()}), flush=True)
    keys = [k for k in rows[0] if k not in ("seed", "secs") and not k.endswith("_p")]
    med = {k: round(float(np.median([r[k] for r in rows])), 4) for k in keys}
    print("median", json.dumps(med), flush=True)


if __name__ == "__main__":
    main()
