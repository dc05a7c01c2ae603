"""Command-line entry point wiring every module.

Subcommands: generate, simulate, score, resources, theory-check,
control-loop, fit-rules, compile-tables.  Every artifact embeds the resolved
config hash and seed; with --deterministic, re-running any command with the
same config and seed produces byte-identical output files.

Exit codes: 0 success, 2 budget/atomicity violation in strict mode,
3 theory-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    cadence_config,
    config_hash,
    experiment_config,
    fusion_config,
    load_config,
    resource_model,
    workload_spec,
)
from .control import CadenceConfig, recluster, run_two_timescale
from .errors import BudgetExceededError, BudgetViolationError
from .experiments import PRESETS, evaluate_preset, preset_dataplane, train
from .fixedpoint import FixedPointFormat
from .keyselect import GlobalIndex, SignatureCodec
from .pipeline import check_budgets
from .symbolic import compile_rules, fit_weights, ground_rule, rules_from_text, rules_to_text
from .theory import run_checks
from .workload import from_csv, generate, score_metrics, split_by_flow, to_csv

EXIT_OK = 0
EXIT_BUDGET = 2
EXIT_THEORY = 3


def _header(cfg: dict) -> dict:
    head = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": __version__,
    }
    if not cfg.get("deterministic"):
        head["generated_at"] = int(time.time())
    return head


def _dump_json(path: Path, obj: dict):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> dict:
    cfg = load_config(args.config, overrides=args.set, seed=args.seed)
    if args.deterministic:
        cfg["deterministic"] = True
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    spec = workload_spec(cfg)
    packets = generate(spec)
    out = _out_dir(args)
    (out / "trace.csv").write_text(to_csv(packets, spec.d, spec.d_v))
    _dump_json(out / "trace_meta.json",
               {**_header(cfg), "packets": len(packets), "flows": spec.flows,
                "d": spec.d, "d_v": spec.d_v})
    print(f"wrote {out / 'trace.csv'} ({len(packets)} packets)")
    return EXIT_OK


def _budget_summary(dp, d_v, rm_cfg_mode):
    rep = dp.budget_report(d_v)
    return rep


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    preset = args.preset or "hybrid"
    if preset not in PRESETS:
        print(f"unknown preset {preset!r}; choose from {PRESETS}", file=sys.stderr)
        return 1
    if args.trace:
        packets, d, d_v = from_csv(Path(args.trace).read_text())
    else:
        spec = workload_spec(cfg)
        packets, d, d_v = generate(spec), cfg["workload"]["d"], cfg["workload"]["d_v"]
    train_p, val_p, test_p = split_by_flow(packets, seed=cfg["seed"])
    ecfg = experiment_config(cfg)
    rm = resource_model(cfg)
    try:
        art = train(train_p, d, d_v, ecfg, resource_model=rm,
                    fusion_base=fusion_config(cfg), theta_high=ecfg.theta_high)
        if args.global_index:
            art.dataplane.install_index(GlobalIndex.load(args.global_index))
        if cfg["resources"]["mode"] == "strict-hw":
            rep = art.dataplane.budget_report(d_v)
            if not rep.all_ok:
                print(rep.to_text(), file=sys.stderr)
                return EXIT_BUDGET
        metrics, detail = evaluate_preset(art, preset, val_p, test_p, seed=cfg["seed"],
                                          fit_blend=cfg["fusion"]["fit_on_validation"])
    except (BudgetViolationError, BudgetExceededError) as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET

    out = _out_dir(args)
    with open(out / "packets.jsonl", "w") as f:
        for rec in detail["records"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    dp = preset_dataplane(art, preset)
    rep = dp.budget_report(d_v)
    stage_uses = [r["stage_use"] for r in detail["records"]] or [0]
    n_tcam = (len(dp.global_index) if dp.global_index else 0) + len(dp.hard_rules)
    summary = {
        **_header(cfg),
        "preset": preset,
        "metrics": metrics.to_dict(),
        "fusion": {"alpha": detail["alpha"], "beta": detail["beta"]},
        "budget": rep.to_dict(),
        "utilization": {
            "stage_frac": max(stage_uses) / rm.stages,
            "tcam_frac": n_tcam / rm.tcam_entries,
            "rule_table_frac": (dp.rule_table.total_bits / rm.sram_table_bits
                                if dp.rule_table else 0.0),
            "per_flow_bits": max((r["stateful_bits"] for r in detail["records"]),
                                 default=0),
        },
        "packets": len(detail["records"]),
    }
    _dump_json(out / "summary.json", summary)
    bits_per_flow = rep.details["combined_flow_bits"]
    (out / "plotdata.csv").write_text(
        "bits_per_flow,window,macro_f1\n"
        f"{bits_per_flow},{dp.window_capacity},{metrics.macro_f1!r}\n"
    )
    print(f"{preset}: macro_f1={metrics.macro_f1:.4f} auc={metrics.auc:.4f} "
          f"({len(detail['records'])} packets) -> {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _load_cfg(args)
    records = [json.loads(line) for line in Path(args.pred).read_text().splitlines()
               if line.strip()]
    scores = np.array([r["score"] for r in records])
    labels = np.array([1 if r["label"] != 0 else 0 for r in records])
    metrics = score_metrics(scores, labels)
    out = _out_dir(args)
    _dump_json(out / "metrics.json", {**_header(cfg), "metrics": metrics.to_dict()})
    print(f"macro_f1={metrics.macro_f1:.4f} precision={metrics.precision:.4f} "
          f"recall={metrics.recall:.4f} auc={metrics.auc:.4f}")
    return EXIT_OK


def cmd_resources(args) -> int:
    cfg = _load_cfg(args)
    rm = resource_model(cfg)
    rep = check_budgets(
        rm,
        m=args.m if args.m is not None else cfg["feature"]["m"],
        d_v=args.d_v if args.d_v is not None else cfg["workload"]["d_v"],
        b=args.bits if args.bits is not None else
        FixedPointFormat.from_string(cfg["formats"]["accumulator"]).total_bits,
        L=args.window if args.window is not None else cfg["selection"]["window"],
        d=args.d if args.d is not None else cfg["workload"]["d"],
        n_entries=args.entries if args.entries is not None else 0,
    )
    print(rep.to_text())
    if args.out:
        _dump_json(_out_dir(args) / "resources.json", {**_header(cfg), **rep.to_dict()})
    if not rep.all_ok and cfg["resources"]["mode"] == "strict-hw":
        return EXIT_BUDGET
    return EXIT_OK


def cmd_theory_check(args) -> int:
    cfg = _load_cfg(args)
    results = run_checks(args.which, seed=cfg["seed"])
    for r in results:
        print(r.summary_line())
        for k, v in r.bound.items():
            print(f"    bound {k} = {v}")
    if args.out:
        _dump_json(_out_dir(args) / "theory.json",
                   {**_header(cfg), "checks": [r.to_dict() for r in results]})
    if not all(r.passed for r in results):
        return EXIT_THEORY
    return EXIT_OK


def _occupancy_stream(kind: str, p: float, horizon: int, n_centroids: int, seed: int):
    rng = np.random.Generator(np.random.Philox(seed ^ 0x0CC0))
    t = np.arange(horizon)[:, None]
    if kind == "stationary":
        probs = np.full((horizon, n_centroids), p)
    elif kind == "step":
        probs = np.where(t < horizon // 2, p, 1.0 - p) * np.ones((1, n_centroids))
    else:  # diurnal
        probs = p + 0.5 * p * np.sin(2 * np.pi * t / horizon) * np.ones((1, n_centroids))
    return (rng.random((horizon, n_centroids)) < probs).astype(float), probs.mean(axis=0)


def cmd_control_loop(args) -> int:
    cfg = _load_cfg(args)
    cad = cadence_config(cfg)
    if args.eta is not None:
        cad = CadenceConfig(t_cp=cad.t_cp, tau_map=cad.tau_map,
                            install_rate=cad.install_rate, eta=args.eta)
    if args.t_cp is not None:
        cad = CadenceConfig(t_cp=args.t_cp, tau_map=cad.tau_map,
                            install_rate=cad.install_rate, eta=cad.eta)
    if args.tau_map is not None:
        cad = CadenceConfig(t_cp=cad.t_cp, tau_map=args.tau_map,
                            install_rate=cad.install_rate, eta=cad.eta)
    if args.install_rate is not None:
        cad = CadenceConfig(t_cp=cad.t_cp, tau_map=cad.tau_map,
                            install_rate=args.install_rate, eta=cad.eta)
    horizon = args.horizon if args.horizon is not None else cfg["cadence"]["horizon"]
    n_centroids = 16
    occ, true_means = _occupancy_stream(args.occupancy, args.p, horizon,
                                        n_centroids, cfg["seed"])

    # slow-path candidate tables recluster a drifting 2-D sample cloud, so
    # delta_map reflects how much the workload actually moved
    codec = SignatureCodec(2, max_norm=2.0)
    fmt = FixedPointFormat.from_string(cfg["formats"]["weights"])
    rng = np.random.Generator(np.random.Philox(cfg["seed"] ^ 0x51A))

    def recluster_fn(step):
        phase = step / max(horizon, 1)
        # centers sit mid-bucket so a stationary cloud reclusters to the same
        # range encoding every epoch and the threshold gate actually skips
        if args.occupancy == "stationary":
            center = np.array([0.9, -0.9])
        elif args.occupancy == "step":
            center = np.array([0.9, -0.9]) * (1.0 if phase < 0.5 else -1.0)
        else:
            center = 0.9 * np.array([np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase)])
        samples = center + 0.03 * rng.standard_normal((32, 2))
        return recluster(None, samples, k_max=2, fmt=fmt,
                         M_tbl=cfg["rules"]["table_bits"], seed=cfg["seed"])

    rep = run_two_timescale(occ, cad, horizon=horizon,
                            packet_rate=cfg["cadence"]["packet_rate"],
                            n_entries=cfg["cadence"]["n_entries"],
                            recluster_fn=recluster_fn, true_means=true_means)
    out = _out_dir(args)
    _dump_json(out / "stability.json", {**_header(cfg), **rep.to_dict()})
    with open(out / "trajectory.csv", "w") as f:
        f.write("t,v,table_version\n")
        for t, v, ver in rep.trajectory_rows():
            f.write(f"{t},{v!r},{ver}\n")
    print(f"eta={cad.eta} t_cp={cad.t_cp}s installs={len(rep.installs)} "
          f"skipped={rep.skipped} rejected={rep.rejected} "
          f"budget_ratio={rep.budget_ratio:.3%} slope={rep.contraction_slope:.4f}")
    return EXIT_OK


def cmd_fit_rules(args) -> int:
    cfg = _load_cfg(args)
    packets, d, d_v = from_csv(Path(args.trace).read_text())
    train_p, _, _ = split_by_flow(packets, seed=cfg["seed"])
    if args.rules:
        rules = rules_from_text(Path(args.rules).read_text())
    else:
        from .experiments import base_rules
        rules = base_rules()
    soft = [r for r in rules if not r.hard]
    remap = {r.rule_id: i for i, r in enumerate(soft)}
    groundings = []
    for i, p in enumerate(train_p):
        y = 1.0 if p.label != 0 else 0.0
        for r in soft:
            g = ground_rule(r, p.field_bits(), y, i)
            groundings.append(g.__class__(remap[r.rule_id], g.example_id, g.distance,
                                          g.label, g.distance_flipped))
    res = fit_weights(groundings, n_rules=len(soft), iters=200, step=0.2, l2=0.05)
    fitted = []
    for r in rules:
        if r.hard:
            fitted.append(r)
        else:
            from dataclasses import replace as _rep
            fitted.append(_rep(r, weight=float(res.weights[remap[r.rule_id]])))
    out = _out_dir(args)
    (out / "rules.txt").write_text(rules_to_text(fitted))
    _dump_json(out / "fit_summary.json",
               {**_header(cfg),
                "weights": [float(w) for w in res.weights],
                "objective_first": res.objective_trace[0],
                "objective_last": res.objective_trace[-1],
                "pinned_rules": res.pinned_rules})
    print(f"fitted {len(soft)} soft rule weights -> {out / 'rules.txt'}")
    return EXIT_OK


def cmd_compile_tables(args) -> int:
    cfg = _load_cfg(args)
    rules = rules_from_text(Path(args.rules).read_text())
    soft = [r for r in rules if not r.hard]
    weights = np.array([r.weight for r in soft])
    fmt = FixedPointFormat.from_string(cfg["formats"]["weights"])
    budget = args.budget if args.budget is not None else cfg["rules"]["table_bits"]
    try:
        table = compile_rules(weights, soft, fmt, budget,
                              drop_to_fit=args.drop_to_fit, s_max=cfg["rules"]["s_max"])
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    out = _out_dir(args)
    (out / "compiled_table.txt").write_text(table.to_table_text())
    print(f"compiled {table.n_entries} entries, {table.total_bits} bits "
          f"<= {budget} -> {out / 'compiled_table.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps so outputs are byte-reproducible")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. feature.m=32")
    common.add_argument("--preset", choices=PRESETS, default=None,
                        help="named configuration axis (consumed by simulate)")
    common.add_argument("--out", help="output directory (default: current)")

    p = argparse.ArgumentParser(prog="attnplane",
                                description="dataplane attention simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", parents=[common], help="emit a synthetic trace CSV")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("simulate", parents=[common],
                        help="replay a trace through the dataplane program")
    sp.add_argument("--trace", help="trace CSV (generated from config when omitted)")
    sp.add_argument("--global-index", help="ternary index table file to install")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("score", parents=[common], help="metrics from a packets.jsonl")
    sp.add_argument("--pred", required=True, help="per-packet JSONL from simulate")
    sp.set_defaults(fn=cmd_score)

    sp = sub.add_parser("resources", parents=[common], help="static budget report")
    sp.add_argument("-m", type=int, default=None, help="feature dimension")
    sp.add_argument("--d-v", type=int, default=None, help="value dimension")
    sp.add_argument("-b", "--bits", type=int, default=None, help="accumulator bit width")
    sp.add_argument("-L", "--window", type=int, default=None, help="window length")
    sp.add_argument("-d", type=int, default=None, help="key dimension")
    sp.add_argument("--entries", type=int, default=None, help="table entries")
    sp.set_defaults(fn=cmd_resources)

    sp = sub.add_parser("theory-check", parents=[common],
                        help="empirical verification of the numerical bounds")
    sp.add_argument("--which", default="all",
                    choices=("kernel", "spectral", "quantization", "coverage", "ema", "all"))
    sp.set_defaults(fn=cmd_theory_check)

    sp = sub.add_parser("control-loop", parents=[common],
                        help="two-timescale adaptation simulation")
    sp.add_argument("--eta", type=float, default=None)
    sp.add_argument("--t-cp", type=float, default=None, dest="t_cp")
    sp.add_argument("--tau-map", type=float, default=None, dest="tau_map")
    sp.add_argument("--install-rate", type=float, default=None, dest="install_rate")
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--occupancy", choices=("stationary", "step", "diurnal"),
                    default="stationary")
    sp.add_argument("--p", type=float, default=0.3, help="occupancy probability")
    sp.set_defaults(fn=cmd_control_loop)

    sp = sub.add_parser("fit-rules", parents=[common],
                        help="fit soft-rule weights on a trace's training split")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--rules", help="input rule file (built-in rules when omitted)")
    sp.set_defaults(fn=cmd_fit_rules)

    sp = sub.add_parser("compile-tables", parents=[common],
                        help="quantize a fitted rule file into a table")
    sp.add_argument("--rules", required=True)
    sp.add_argument("--budget", type=int, default=None, help="table budget in bits")
    sp.add_argument("--drop-to-fit", action="store_true",
                    help="drop lowest-weight rules instead of failing")
    sp.set_defaults(fn=cmd_compile_tables)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
