"""Command-line interface: verify, kernels, simulate, expand.

    stopchaos verify   [--config cfg.json] [--seed S] [--out DIR]
    stopchaos kernels  [--config cfg.json] [--seed S] [--out DIR]
    stopchaos simulate [--config cfg.json] [--seed S] [--out DIR]
                       [--measure P|Q] [--paths N]
    stopchaos expand   [--config cfg.json] [--seed S] [--out DIR]

Without --config the default desk-scale scenario is used.  JSON goes to
the output directory (config field ``output_dir`` unless --out is given);
bulk numerics are CSV.  The exit status of ``verify`` reflects overall
pass/fail; invalid configurations exit with status 2 and a field-path
message.  STOPCHAOS_WORKERS sets the dispatch pool size only and never
changes numeric output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, default_acceptance_config
from .expansion import run_expansion_study
from .grids import QuadratureGrid
from .kernels import ChaosKernel, SimplexQuadrature, parseval_tail_bound, parseval_term
from .operators import SemigroupOperators
from .paths import RngStream, TimeGrid, run_stopped_batch, simulate_P, simulate_Q
from .verify import run_verify


def _load_config(args):
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = default_acceptance_config()
    updates = {}
    if args.seed is not None:
        updates["mc"] = {**cfg.to_dict()["mc"], "seed": args.seed}
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        obj = cfg.to_dict()
        obj.update(updates)
        cfg = ExperimentConfig.from_dict(obj)
    return cfg


def _ensure_out(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def cmd_verify(args):
    cfg = _load_config(args)
    out = _ensure_out(cfg)
    records = run_verify(cfg, out_dir=out)
    for r in records:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:18s} computed={r.computed:.6g} "
              f"oracle={r.oracle:.6g} tol={r.tolerance:.3g} [{r.runtime_s:.1f}s]")
    ok = all(r.passed for r in records)
    print(f"{'all checks passed' if ok else 'FAILURES PRESENT'} -> {out}/report.json")
    return 0 if ok else 1


def _kernel_objects(cfg):
    model = cfg.model()
    grid = QuadratureGrid.for_model(model, cfg.grid.nodes, cfg.grid.halfline_cutoff, cfg.u)
    ops = SemigroupOperators(model, grid)
    kernel = ChaosKernel(ops, cfg.u, cfg.boundary_phi())
    quad = SimplexQuadrature.for_kernel(kernel, cfg.quadrature.alpha_target,
                                        cfg.quadrature.nodes_per_axis)
    return kernel, quad


def cmd_kernels(args):
    cfg = _load_config(args)
    out = _ensure_out(cfg)
    kernel, quad = _kernel_objects(cfg)
    order = cfg.expansion_order
    rows = [(0, "", "", "", kernel.a0)]
    sub = quad.nodes[:: max(1, len(quad.nodes) // 8)]
    if order >= 1:
        for t1 in quad.nodes:
            rows.append((1, t1, "", "", kernel.eval([t1])))
    if order >= 2:
        for s1 in sub:
            for s2 in sub:
                rows.append((2, s1, s1 + s2, "", kernel.eval([s1, s1 + s2])))
    if order >= 3:
        sub3 = sub[::2]
        for s1 in sub3:
            for s2 in sub3:
                for s3 in sub3:
                    rows.append((3, s1, s1 + s2, s1 + s2 + s3,
                                 kernel.eval([s1, s1 + s2, s1 + s2 + s3])))
    csv_path = os.path.join(out, "kernels.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "t1", "t2", "t3", "value"])
        writer.writerows(rows)
    summary = [{"order": 0, "parseval_term": kernel.a0**2, "tail_bound": 0.0}]
    for n in range(1, order + 1):
        summary.append({
            "order": n,
            "parseval_term": parseval_term(kernel, n, quad),
            "tail_bound": parseval_tail_bound(kernel, n, quad),
        })
    with open(os.path.join(out, "kernels.json"), "w") as fh:
        json.dump({"horizon": quad.horizon, "orders": summary}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {csv_path} and kernels.json (orders 0..{order})")
    return 0


def cmd_simulate(args):
    cfg = _load_config(args)
    model = cfg.model()
    mc = cfg.mc_config()
    horizon = mc.resolve_horizon(model, cfg.u)
    out = _ensure_out(cfg)
    tg = TimeGrid(mc.dt, horizon)
    res = run_stopped_batch(model, cfg.u, tg, RngStream(mc.seed), 0,
                            mc.n_samples, args.measure)
    alive = res["exit_step"] < 0
    surv = (alive | (res["exit_time"] > horizon)).astype(float)
    if args.measure == "P":
        surv = surv * res["weight"]
    mean = float(np.mean(surv))
    stderr = float(np.std(surv, ddof=1) / np.sqrt(mc.n_samples))
    summary = {
        "n_samples": mc.n_samples,
        "dt": mc.dt,
        "horizon": horizon,
        "estimator": f"survival_probability(t={horizon:g}) under Q"
                     + (" via importance-weighted P samples" if args.measure == "P" else ""),
        "mean": mean,
        "stderr": stderr,
        "clamp_events": 0,
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    if args.paths > 0:
        sim = simulate_P if args.measure == "P" else simulate_Q
        path_csv = os.path.join(out, "paths.csv")
        with open(path_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "step", "time", "position", "exited", "weight"])
            for k in range(args.paths):
                p = sim(model, cfg.u, tg, RngStream(mc.seed), sample_index=k)
                last = p.exit_index if p.exit_index is not None else tg.n_steps
                for i in range(last + 1):
                    writer.writerow([k, i, i * tg.dt, p.positions[i],
                                     p.exit_index is not None and i >= p.exit_index,
                                     p.importance_weight])
        print(f"wrote {path_csv} ({args.paths} paths)")
    print(f"survival estimate {mean:.6f} +- {stderr:.2e} -> {out}/summary.json")
    return 0


def cmd_expand(args):
    cfg = _load_config(args)
    out = _ensure_out(cfg)
    model = cfg.model()
    kernel, quad = _kernel_objects(cfg)
    N = cfg.expansion_order
    mc = cfg.mc_config()
    study = run_expansion_study(model, cfg.u, cfg.boundary_phi(), N, mc,
                                ops=kernel.ops)
    resid = study.residual_estimate(N)
    orth = []
    for m in range(0, N + 1):
        for n in range(m + 1, N + 1):
            est = study.moment_estimate(m, n)
            orth.append({"m": m, "n": n, "mean": est.mean, "stderr": est.stderr})
    payload = {
        "N": N,
        "a0": study.a0,
        "parseval_terms": [parseval_term(kernel, n, quad) for n in range(1, N + 1)],
        "residual": {"mean": resid.mean, "stderr": resid.stderr},
        "orthogonality": orth,
        "dt": mc.dt,
        "n_samples": mc.n_samples,
        "seed": mc.seed,
        "censored_paths": study.censored,
    }
    path = os.path.join(out, "expand.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"order-{N} residual {resid.mean:.6f} +- {resid.stderr:.2e} -> {path}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="stopchaos",
        description="chaos expansions for boundary-weighted stopped Brownian functionals",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("kernels", cmd_kernels),
                     ("simulate", cmd_simulate), ("expand", cmd_expand)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override mc.seed")
        p.add_argument("--out", help="override output directory")
        if name == "simulate":
            p.add_argument("--measure", choices=("P", "Q"), default="Q")
            p.add_argument("--paths", type=int, default=0,
                           help="also dump this many full trajectories")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
