"""Scenario runner: ``run``, ``compare`` and ``sweep``.

Exit codes: 0 ok, 2 malformed scenario or arguments, 3 protocol failure,
4 incomparable reports.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dealer import ContractError, DealerExhaustedError, FreshnessError, TripleReuseError
from .engine import Engine, RunMode
from .kvcache import STRATEGIES, PrefetchPolicy, markov_trace, simulate_trace
from .model import ModelConfig
from .protocols import IdealCostModel
from .ring import FixedPointCodec, RangeError
from .scenario import Scenario, ScenarioError, bundled_scenarios, load_scenario
from .sparse import (
    gemm_cost,
    partition_components,
    simm_cost,
    somm_cost,
    spgemm_input_cost,
    spgemm_output_cost,
)
from .transport import BANDWIDTH_PRESETS, NetworkAborted, ProtocolDesyncError, ledger_report, wall_time

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_INCOMPARABLE = 0, 2, 3, 4
ELEM_BYTES = 8
REPORT_COLUMNS = ("run", "phase", "party", "elements", "bytes", "rounds", "wall_time_s", "ratio_vs_baseline")
PROTOCOL_ERRORS = (ProtocolDesyncError, NetworkAborted, TripleReuseError, FreshnessError,
                   DealerExhaustedError, RangeError)


class IncomparableError(ValueError):
    pass


@dataclass
class Report:
    scenario: Scenario
    rows: list  # dicts keyed by REPORT_COLUMNS
    trace: list  # dicts
    summary: dict
    primary: str
    baseline: str | None = None
    sweep: list = field(default_factory=list)


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isinf(x) or math.isnan(x):
            return ""
        return f"{x:.9g}"
    return str(x)


def _ratio(num: float, den: float):
    return num / den if den else float("nan")


def _with_ratios(rows: list, baseline: str | None) -> list:
    base = {(r["phase"], r["party"]): r["elements"] for r in rows if r["run"] == baseline}
    for r in rows:
        b = base.get((r["phase"], r["party"]))
        r["ratio_vs_baseline"] = _ratio(b, r["elements"]) if (b is not None and baseline) else float("nan")
    return rows


def _row(run, phase, party, elements, rounds, bw, rtt_s) -> dict:
    b = int(elements) * ELEM_BYTES
    return {"run": run, "phase": phase, "party": party, "elements": int(elements), "bytes": b,
            "rounds": int(rounds), "wall_time_s": wall_time(rounds, b, bw, rtt_s)}


def _totals(rows: list, run: str) -> tuple[int, int]:
    tot = [r for r in rows if r["run"] == run and r["phase"] == "TOTAL"]
    return sum(r["elements"] for r in tot), max((r["rounds"] for r in tot), default=0)


# --- runners ---------------------------------------------------------------------------------


def _cost_model(sc: Scenario) -> IdealCostModel:
    path = sc["cost"]["model_file"]
    cm = IdealCostModel.from_file(sc.base_dir / path) if path else IdealCostModel()
    return IdealCostModel(C=sc["cost"]["C"], entries=cm.entries)


def _run_mode(sc: Scenario, backend: str | None = None) -> RunMode:
    r = sc["run"]
    return RunMode(
        backend=backend or r["backend"], source=r["source"], ffn_sparsity=r["ffn_sparsity"],
        head_rate=r["head_rate"], structure=r["structure"], cache=r["cache"], dp_epsilon=r["dp_epsilon"],
        seed=sc.seed, trunc=r["trunc"], prefetch_w=r["prefetch_w"], run_predictor=r["run_predictor"],
        delta_oracle=r["delta_oracle"],
    )


def _prepare_decode(sc: Scenario):
    """Everything that can fail because of the scenario itself (exit 2)."""
    try:
        cfg = ModelConfig(**sc["model"])
        codec = FixedPointCodec(k=64, f=sc["ring"]["f"])
        cost = _cost_model(sc)
        mode = _run_mode(sc)
        if sc["run"]["prompt_len"] < 1 or sc["run"]["gen_len"] < 0:
            raise ContractError("prompt_len must be >= 1 and gen_len >= 0")
        if sc["run"]["prompt_len"] + sc["run"]["gen_len"] > cfg.max_len:
            raise ContractError("prompt_len + gen_len exceeds model.max_len")
    except (ContractError, ValueError, OSError, configparser.Error) as e:
        raise ScenarioError(str(e), sc.source) from None
    return cfg, codec, cost, mode


def run_decode(sc: Scenario, bw: float, rtt_s: float) -> Report:
    cfg, codec, cost, mode = _prepare_decode(sc)
    prompt = np.random.default_rng([sc.seed, 0x7A]).integers(0, cfg.vocab, sc["run"]["prompt_len"]).tolist()
    gen = sc["run"]["gen_len"]
    engine = Engine(cfg, mode, codec, cost)
    res = engine.decode_loop(prompt, gen)
    runs = [(mode.backend, res)]
    baseline = None
    if sc["run"]["baseline"] == "dense" and mode.backend != "dense":
        dense = Engine(cfg, _run_mode(sc, "dense"), codec, cost, weights=engine.weights).decode_loop(prompt, gen)
        runs.append(("dense", dense))
        baseline = "dense"
    elif mode.backend == "dense":
        baseline = "dense"
    rows, trace = [], []
    for label, r in runs:
        for lr in ledger_report(r.ledger, k=64, bandwidth=bw, rtt_s=rtt_s):
            rows.append({"run": label, "phase": lr.phase, "party": lr.party, "elements": lr.elements,
                         "bytes": lr.bytes, "rounds": lr.rounds, "wall_time_s": lr.wall_time_s})
        for t in r.trace_rows:
            trace.append({"run": label, **t})
    _with_ratios(rows, baseline)
    total, rounds = _totals(rows, mode.backend)
    summary = {
        "tokens": res.tokens,
        "total_elements": total,
        "total_rounds": rounds,
        "phases": res.ledger.by_phase(),
    }
    if baseline and baseline != mode.backend:
        dense = runs[1][1]
        btotal, _ = _totals(rows, baseline)
        summary["baseline_total_elements"] = btotal
        summary["ratio_vs_baseline"] = _ratio(btotal, total)
        fc1 = res.ledger.sent(phase="FC1")
        summary["fc1_gemm_over_somm"] = _ratio(dense.ledger.sent(phase="FC1"), fc1)
        summary["logits_match_baseline"] = all(
            np.array_equal(a, b) for a, b in zip(res.logits, dense.logits)) and len(res.logits) == len(dense.logits)
    for kind in ("ffn", "head"):
        p, rc = res.precision_recall(kind)
        if not math.isnan(p):
            summary[f"{kind}_precision"], summary[f"{kind}_recall"] = p, rc
    dens = {}
    for kind, _li, _step, d in res.mask_log:
        dens.setdefault(kind, []).append(d)
    for kind, v in dens.items():
        summary[f"{kind}_mask_density"] = float(np.mean(v))
    return Report(sc, rows, trace, summary, mode.backend, baseline)


def _counting_mask(sc: Scenario) -> np.ndarray:
    c = sc["counting"]
    m, p, s = c["m"], c["p"], c["sparsity"]
    if min(m, c["n"], p) < 1 or not 0.0 <= s <= 1.0:
        raise ScenarioError("counting dims must be positive and sparsity in [0, 1]", sc.source)
    rng = np.random.default_rng([sc.seed, 0xFC])
    if c["structure"] == "column":
        k = int(round((1.0 - s) * p))
        cols = np.zeros(p, dtype=np.uint8)
        cols[rng.choice(p, size=k, replace=False)] = 1
        return np.repeat(cols[None, :], m, axis=0)
    return (rng.random((m, p)) >= s).astype(np.uint8)


def run_fc1_counting(sc: Scenario, bw: float, rtt_s: float) -> Report:
    """Closed-form FFN traffic (both parties, split evenly) for dense, sparse and per-nonzero baselines."""
    c = sc["counting"]
    m, n, p = c["m"], c["n"], c["p"]
    mask = _counting_mask(sc)
    nnz = int(mask.sum())
    part = partition_components(mask) if nnz else None
    costs = {
        "dense": {"FC1": gemm_cost(m, n, p), "FC2": gemm_cost(m, p, n)},
        "sparse": {"FC1": somm_cost(part, n) if part else 0, "FC2": simm_cost(mask, n)},
        "spgemm": {"FC1": spgemm_output_cost(nnz, n), "FC2": spgemm_input_cost(nnz, n)},
    }
    rows = []
    for run, ph in costs.items():
        for party in (1, 2):
            for phase, tot in ph.items():
                rows.append(_row(run, phase, party, tot // 2, 1 if tot else 0, bw, rtt_s))
            total = sum(ph.values()) // 2
            rows.append(_row(run, "TOTAL", party, total, sum(1 for v in ph.values() if v), bw, rtt_s))
    _with_ratios(rows, "dense")
    summary = {
        "nnz": nnz,
        "density": nnz / mask.size,
        "structure": c["structure"],
        # random elementwise masks fragment into many components; ratios depend on the draw
        "pattern_dependent": c["structure"] == "elementwise",
        "fc1_gemm_over_somm": _ratio(costs["dense"]["FC1"], costs["sparse"]["FC1"]),
        "fc2_gemm_over_simm": _ratio(costs["dense"]["FC2"], costs["sparse"]["FC2"]),
        "fc1_spgemm_over_somm": _ratio(costs["spgemm"]["FC1"], costs["sparse"]["FC1"]),
        "fc2_spgemm_over_simm": _ratio(costs["spgemm"]["FC2"], costs["sparse"]["FC2"]),
    }
    summary["total_elements"], summary["total_rounds"] = _totals(rows, "sparse")
    summary["ratio_vs_baseline"] = _ratio(_totals(rows, "dense")[0], summary["total_elements"])
    return Report(sc, rows, [], summary, "sparse", "dense")


def run_kv_trace(sc: Scenario, bw: float, rtt_s: float) -> Report:
    """Counting-mode replay of one layer's QKV and refill traffic under each cache strategy."""
    try:
        cfg = ModelConfig(**sc["model"])
    except ContractError as e:
        raise ScenarioError(str(e), sc.source) from None
    kv = sc["kv"]
    if kv["tokens"] <= kv["prompt_len"] or kv["prompt_len"] < 1 or not 0.0 < kv["rate"] < 1.0:
        raise ScenarioError("kv needs tokens > prompt_len >= 1 and 0 < rate < 1", sc.source)
    h, H, d = cfg.hidden, cfg.heads, cfg.head_dim
    act = markov_trace(kv["tokens"], H, kv["rate"], np.random.default_rng(sc.seed), kv["stickiness"], kv["spread"])
    w = kv["prefetch_w"] if kv["prefetch_w"] is not None else h * 2 * d
    policy = PrefetchPolicy(w=w, x=h)
    rows, trace, res = [], [], {}
    for strat in STRATEGIES:
        r = simulate_trace(act, kv["prompt_len"], strat, H, h, d, policy)
        res[strat] = r
        for party in (1, 2):
            rows.append(_row(strat, "QKV", party, r.qkv, r.qkv_rounds, bw, rtt_s))
            rows.append(_row(strat, "CacheRefill", party, r.refill, r.refill_rounds, bw, rtt_s))
            rows.append(_row(strat, "TOTAL", party, r.total, r.rounds, bw, rtt_s))
        for t in r.rows:
            trace.append({"run": strat, **t})
    _with_ratios(rows, "PR")
    pr, mr, mp = res["PR"], res["MR"], res["MR+prefetch"]
    summary = {
        "activation_rate": float(act.mean()),
        "refill_pr_over_mr": _ratio(pr.refill, mr.refill),
        "refill_mr_over_prefetch": _ratio(mr.refill, mp.refill),
        "total_pr_over_mr": _ratio(pr.total, mr.total),
        "strict_order": bool(mp.total < mr.total < pr.total),
        "prefetched_heads": sum(t["prefetched"] for t in mp.rows),
    }
    summary["total_elements"], summary["total_rounds"] = _totals(rows, "MR+prefetch")
    summary["ratio_vs_baseline"] = _ratio(_totals(rows, "PR")[0], summary["total_elements"])
    return Report(sc, rows, trace, summary, "MR+prefetch", "PR")


RUNNERS = {"decode": run_decode, "fc1_counting": run_fc1_counting, "kv_trace": run_kv_trace}


def run_scenario(sc: Scenario) -> Report:
    bw = BANDWIDTH_PRESETS[sc["transport"]["bandwidth"]]
    rtt_s = sc["transport"]["rtt_ms"] / 1000.0
    rep = RUNNERS[sc.kind](sc, bw, rtt_s)
    rep.summary = {
        "name": sc.name, "kind": sc.kind, "scenario_hash": sc.hash(), "seed": sc.seed,
        "primary": rep.primary, "baseline": rep.baseline,
        "bandwidth": sc["transport"]["bandwidth"], "rtt_ms": sc["transport"]["rtt_ms"],
        **rep.summary, "scenario": sc.identity(),
    }
    return rep


# --- output -----------------------------------------------------------------------------------


def _write_csv(path: Path, rows: list, columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(type(x))


def _clean(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def write_report(rep: Report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "report.csv", rep.rows, REPORT_COLUMNS)
    trace_cols = None
    if rep.trace:
        trace_cols = list(dict.fromkeys(k for r in rep.trace for k in r))
    _write_csv(out_dir / "trace.csv", rep.trace, trace_cols or ["run"])
    (out_dir / "summary.json").write_text(
        json.dumps(_clean(rep.summary), indent=2, sort_keys=True, default=_json_default) + "\n")


def summary_line(rep: Report) -> str:
    s = rep.summary
    parts = [f"{s['name']} [{s['scenario_hash']}]", f"kind={s['kind']}", f"run={rep.primary}",
             f"elements={s['total_elements']}", f"rounds={s['total_rounds']}"]
    if rep.baseline and rep.baseline != rep.primary and not math.isnan(s.get("ratio_vs_baseline", float("nan"))):
        parts.append(f"reduction_vs_{rep.baseline}={s['ratio_vs_baseline']:.3f}x")
    for k in ("fc1_gemm_over_somm", "refill_pr_over_mr"):
        if k in s and not math.isnan(s[k]):
            parts.append(f"{k}={s[k]:.3f}")
    return " ".join(parts)


# --- compare ------------------------------------------------------------------------------


def _report_dir(p: Path) -> Path:
    return p.parent if p.is_file() else p


def load_report(p) -> tuple[list, dict]:
    d = _report_dir(Path(p))
    try:
        with open(d / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        summary = json.loads((d / "summary.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioError(f"cannot read report: {e}", str(d)) from None
    for r in rows:
        r["party"] = int(r["party"])
        r["elements"] = int(r["elements"])
        r["bytes"] = int(r["bytes"])
        r["rounds"] = int(r["rounds"])
    return rows, summary


# run settings that may differ between compared reports (the varied axis)
_COMPARABLE_VARY = ("run.", "transport.", "cost.")
_COMPARABLE_FIXED = {"run.prompt_len", "run.gen_len"}


def check_comparable(sa: dict, sb: dict) -> list[str]:
    a, b = sa.get("scenario", {}), sb.get("scenario", {})
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    if sa.get("kind") != sb.get("kind"):
        raise IncomparableError(f"different scenario kinds: {sa.get('kind')} vs {sb.get('kind')}")
    bad = [k for k in diff if not k.startswith(_COMPARABLE_VARY) or k in _COMPARABLE_FIXED]
    if bad:
        raise IncomparableError("scenarios differ outside the run settings: " + ", ".join(bad))
    return diff


def compare_reports(a, b) -> tuple[list, list]:
    """Ratios ``a / b`` for each (phase, party) of the two primary runs."""
    ra, sa = load_report(a)
    rb, sb = load_report(b)
    diff = check_comparable(sa, sb)
    pa = {(r["phase"], r["party"]): r for r in ra if r["run"] == sa["primary"]}
    pb = {(r["phase"], r["party"]): r for r in rb if r["run"] == sb["primary"]}
    rtt_a, rtt_b = sa["rtt_ms"] / 1000.0, sb["rtt_ms"] / 1000.0
    keys = [k for k in pa if k in pb] + [k for k in pb if k not in pa]
    out = []
    for key in keys:
        x, y = pa.get(key), pb.get(key)
        ea = x["elements"] if x else 0
        eb = y["elements"] if y else 0
        row = {"phase": key[0], "party": key[1], "elements_a": ea, "elements_b": eb, "ratio": _ratio(ea, eb)}
        for name, bw in BANDWIDTH_PRESETS.items():
            ta = wall_time(x["rounds"], x["bytes"], bw, rtt_a) if x else 0.0
            tb = wall_time(y["rounds"], y["bytes"], bw, rtt_b) if y else 0.0
            row[f"time_ratio_{name}"] = _ratio(ta, tb)
        out.append(row)
    return out, diff


# --- sweep ----------------------------------------------------------------------------------


_AXIS_ALIASES = {
    ("decode", "sparsity"): ("run", "ffn_sparsity"),
    ("fc1_counting", "sparsity"): ("counting", "sparsity"),
    ("decode", "head_rate"): ("run", "head_rate"),
    ("kv_trace", "rate"): ("kv", "rate"),
}


def parse_axis(axis: str, kind: str) -> tuple[str, str, list[float]]:
    """``name=a:b[:n]`` (``n`` points, default 5) or ``name=v1,v2,...``."""
    if "=" not in axis:
        raise ScenarioError(f"axis must look like name=a:b[:n], got {axis!r}", "--axis")
    name, rng = axis.split("=", 1)
    name = name.strip()
    if (kind, name) in _AXIS_ALIASES:
        sec, key = _AXIS_ALIASES[(kind, name)]
    elif "." in name:
        sec, key = name.split(".", 1)
    else:
        raise ScenarioError(f"unknown axis {name!r} for {kind} scenarios (use section.key)", "--axis")
    try:
        if ":" in rng:
            parts = [float(v) for v in rng.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            n = int(parts[2]) if len(parts) == 3 else 5
            if n < 1:
                raise ValueError
            values = np.linspace(parts[0], parts[1], n).tolist()
        else:
            values = [float(v) for v in rng.split(",")]
    except ValueError:
        raise ScenarioError(f"bad axis range {rng!r}", "--axis") from None
    return sec, key, values


def run_sweep(sc: Scenario, axis: str) -> tuple[list, list]:
    sec, key, values = parse_axis(axis, sc.kind)
    out, reports = [], []
    for v in values:
        conv = int(v) if isinstance(sc[sec].get(key), int) and float(v).is_integer() else float(v)
        point = sc.with_value(sec, key, conv)
        rep = run_scenario(point)
        reports.append(rep)
        for run in dict.fromkeys(r["run"] for r in rep.rows):
            tot, rounds = _totals(rep.rows, run)
            base = _totals(rep.rows, rep.baseline)[0] if rep.baseline else 0
            out.append({"axis": f"{sec}.{key}", "value": conv, "run": run, "elements": tot, "rounds": rounds,
                        "ratio_vs_baseline": _ratio(base, tot) if rep.baseline else float("nan")})
    return out, reports


# --- entry point ----------------------------------------------------------------------------


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if arg in bundled:
        return bundled[arg]
    if p.stem in bundled and not p.parent.parts:
        return bundled[p.stem]
    return p


def _apply_overrides(sc: Scenario, args) -> Scenario:
    if getattr(args, "seed", None) is not None:
        sc = sc.with_value("scenario", "seed", int(args.seed))
    if getattr(args, "bandwidth", None) is not None:
        sc = sc.with_value("transport", "bandwidth", args.bandwidth)
    if getattr(args, "out", None) is not None:
        sc = sc.with_value("output", "dir", args.out)
    return sc


def _out_dir(sc: Scenario) -> Path:
    d = Path(sc["output"]["dir"])
    return d if d.is_absolute() else Path.cwd() / d


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsempc", description="Two-party sparse transformer inference cost runner")
    sub = ap.add_subparsers(dest="cmd", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override [scenario] seed")
    common.add_argument("--bandwidth", choices=list(BANDWIDTH_PRESETS), help="override [transport] bandwidth")
    common.add_argument("--out", help="override [output] dir")
    p = sub.add_parser("run", parents=[common], help="run one scenario")
    p.add_argument("config", help="scenario file or bundled scenario name")
    p = sub.add_parser("compare", help="ratio table between two report directories (a / b)")
    p.add_argument("a")
    p.add_argument("b")
    p = sub.add_parser("sweep", parents=[common], help="run a scenario across one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, help="e.g. sparsity=0.0:0.99[:n] or run.head_rate=0.25,0.5")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.cmd == "list":
            for name, path in bundled_scenarios().items():
                print(f"{name}\t{path}")
            return EXIT_OK
        if args.cmd == "compare":
            rows, diff = compare_reports(args.a, args.b)
            w = csv.writer(sys.stdout, lineterminator="\n")
            cols = list(rows[0].keys()) if rows else ["phase"]
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in cols])
            print(f"# varied: {', '.join(diff) if diff else 'nothing'}", file=sys.stderr)
            return EXIT_OK
        sc = _apply_overrides(load_scenario(_resolve_config(args.config)), args)
        if args.cmd == "run":
            rep = run_scenario(sc)
            write_report(rep, _out_dir(sc))
            print(summary_line(rep))
            return EXIT_OK
        rows, reps = run_sweep(sc, args.axis)
        out = _out_dir(sc)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", rows)
        for rep in reps:
            print(summary_line(rep))
        return EXIT_OK
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IncomparableError as e:
        print(f"error: incomparable reports: {e}", file=sys.stderr)
        return EXIT_INCOMPARABLE
    except PROTOCOL_ERRORS + (ContractError,) as e:
        print(f"protocol error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
