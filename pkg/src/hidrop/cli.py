"""``hidrop`` command line: FLOPs reports, schedule planning, metric extraction, sweeps, self-checks.

Every CSV starts with a ``# config-hash:`` comment line, then a header row.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from hidrop import presets
from hidrop.config import ConfigError, RunConfig, config_from_dict, load_config
from hidrop.schedule import (
    DECOUPLED, ED, GED, SERIAL, CostModel, DecayCurve, PruneSchedule, ScheduleError, average_tokens,
    decay_keep_ratio, evenly_spaced_schedule, flops, layer_flops, layer_token_counts, prefill_latency,
    reduction_percent, schedule_from_budget,
)
from hidrop.trace import SYSTEM, TEXTUAL, VISUAL, TraceSchemaError, read_traces

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else format(float(v), ".12g")
    return str(v)


def render_csv(digest: str, header: Sequence[str], rows: Iterable[Sequence], notes: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write(f"# config-hash: {digest}\n")
    for note in notes:
        buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, float) and np.isnan(v):
        return None
    return v


def emit(args, digest: str, header, rows, notes=(), summary: Optional[dict] = None) -> None:
    rows = [list(r) for r in rows]
    text = render_csv(digest, header, rows, notes)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    if getattr(args, "json", None):
        payload = {"config_hash": digest, "columns": list(header),
                   "rows": [[_jsonable(v) for v in r] for r in rows]}
        if summary:
            payload["summary"] = {k: _jsonable(v) for k, v in summary.items()}
        Path(args.json).write_text(json.dumps(payload, indent=2, default=str) + "\n", encoding="utf-8")
    if not args.csv or args.stdout_csv:
        sys.stdout.write(text)


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args) -> RunConfig:
    """Config file (if any) with command-line overrides applied, validated."""
    base = load_config(args.config).to_dict() if getattr(args, "config", None) else {}
    base_dir = Path(args.config).parent if getattr(args, "config", None) else None
    for key in ("model", "schedule", "strategy"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if getattr(args, "pe", None):
        base["pe"] = {**base.get("pe", {}), "variant": args.pe}
    if getattr(args, "seed", None) is not None:
        base["seeds"] = [args.seed]
    return config_from_dict(base, base_dir)


def _common_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--csv", metavar="PATH", help="write CSV here instead of stdout")
    p.add_argument("--json", metavar="PATH", help="also write a JSON mirror of the rows")
    p.add_argument("--stdout-csv", action="store_true", help="print CSV to stdout even with --csv")


# ------------------------------------------------------------------ flops


def cmd_flops(args) -> int:
    cfg = _config(args)
    shape = cfg.shape()
    sched = cfg.resolve_schedule()
    counts = layer_token_counts(sched, shape.layers)
    per_layer = [layer_flops(int(n), shape) for n in counts]
    total = flops(counts, shape)
    avg = average_tokens(counts)
    red = reduction_percent(avg, sched.n_v)
    summary = {"model": cfg.model_name(), "total_flops": total, "tflops": round(total / 1e12, 2),
               "average_tokens": avg, "reduction_percent": red, "stage_counts": list(sched.stage_counts)}
    if args.table:
        print(f"model            {cfg.model_name()} (L={shape.layers}, d={shape.hidden}, m={shape.ffn})")
        print(f"schedule         inject={sched.inject_layer} exit={sched.exit_layer} "
              f"filters={list(sched.filter_layers)} stages={list(sched.stage_counts)}")
        print(f"average tokens   {avg:.3f}")
        print(f"reduction        {red:.1f}%")
        print(f"total            {total / 1e12:.2f} TFLOPs")
        return EXIT_OK
    rows = [(i, int(n), f) for i, (n, f) in enumerate(zip(counts, per_layer), start=1)]
    notes = [f"total_flops: {total}", f"tflops: {total / 1e12:.2f}", f"average_tokens: {avg:.6g}",
             f"reduction_percent: {red:.1f}"]
    emit(args, cfg.digest(cmd="flops"), ("layer", "n_vision", "flops"), rows, notes, summary)
    return EXIT_OK


# ------------------------------------------------------------------ sweep-ged


def ged_sweep(ps: Sequence[float], n_v: int, first: int, last: int, r_end: Optional[float] = None):
    """Rows ``(layer, t, ED, GED(p) ...)`` of token counts; lower p must lie below higher p inside."""
    if any(not p > 0 for p in ps):
        raise CliError("GED exponents must be positive")
    if last <= first:
        raise CliError("--last must exceed --first")
    r_end = 1.0 / n_v if r_end is None else r_end
    ps = sorted(set(ps))
    t = (np.arange(first, last + 1) - first) / (last - first)
    ed = n_v * decay_keep_ratio(DecayCurve(ED, r_end=r_end), t)
    curves = np.array([n_v * decay_keep_ratio(DecayCurve(GED, p, r_end), t) for p in ps])
    inner = curves[:, 1:-1]
    if inner.size and len(ps) > 1 and not np.all(inner[:-1] < inner[1:]):
        raise CliError("ordering violated: a lower p curve is not strictly below a higher p curve")
    rows = [(first + i, t[i], ed[i], *curves[:, i]) for i in range(t.size)]
    header = ("layer", "t", "ED", *(f"p={p:g}" for p in ps))
    return header, rows


def cmd_sweep_ged(args) -> int:
    cfg = _config(args)
    ps = args.p if args.p is not None else list(cfg.sweep.p)
    header, rows = ged_sweep(ps, args.n_v, args.first, args.last, args.r_end)
    emit(args, cfg.digest(cmd="sweep-ged", p=ps, n_v=args.n_v, first=args.first, last=args.last,
                          r_end=args.r_end), header, rows)
    return EXIT_OK


# ------------------------------------------------------------------ schedule-plan


def cmd_schedule_plan(args) -> int:
    cfg = _config(args)
    layers = args.layers or cfg.shape().layers
    try:
        if args.stages:
            sched = evenly_spaced_schedule(args.stages, layers, args.inject or 1,
                                           args.exit if args.exit else None)
        elif args.avg is not None:
            if args.inject is None or args.exit is None or args.filters is None:
                raise CliError("--avg needs --inject, --exit and --filters")
            sched = schedule_from_budget(args.inject, args.exit, args.filters, args.n_v, args.avg, layers)
        else:
            sched = cfg.resolve_schedule()
    except ScheduleError as exc:
        raise CliError(str(exc)) from None
    counts = layer_token_counts(sched, layers)
    avg = average_tokens(counts)
    if args.out:
        sched.save(args.out)
    rows = [(i, int(n)) for i, n in enumerate(counts, start=1)]
    notes = [f"schedule: {json.dumps(sched.to_dict(), separators=(',', ':'))}",
             f"average_tokens: {avg:.6g}", f"reduction_percent: {reduction_percent(avg, sched.n_v):.1f}"]
    emit(args, cfg.digest(cmd="schedule-plan", schedule=sched.to_dict()), ("layer", "n_vision"), rows, notes,
         {"average_tokens": avg, **sched.to_dict()})
    return EXIT_OK


# ------------------------------------------------------------------ metrics


def _load_traces(paths):
    traces = []
    for p in paths:
        try:
            traces.extend(read_traces(p))
        except TraceSchemaError as exc:
            raise CliError(f"{p}: {exc}") from None
        except FileNotFoundError:
            raise CliError(f"trace file not found: {p}") from None
    return traces


def _pairs(traces):
    groups = {}
    for tr in traces:
        if tr.pairing is None or tr.pair_id is None:
            continue
        groups.setdefault(tr.pair_id, {})[tr.pairing] = tr
    pairs = [(g["mismatched"], g["reference"]) for _, g in sorted(groups.items())
             if "mismatched" in g and "reference" in g]
    if not pairs:
        raise CliError("s_cross needs traces with pairing=mismatched/reference sharing a pair_id")
    return pairs


def cmd_metrics(args) -> int:
    from hidrop import metrics

    cfg = _config(args)
    traces = _load_traces(args.traces)
    digest = cfg.digest(cmd="metrics", which=args.which, traces=[Path(p).name for p in args.traces],
                        k=args.k, n=args.n, mode=args.mode, window=args.window)
    try:
        if args.which == "s_intra":
            mods = [m for m in (SYSTEM, VISUAL, TEXTUAL) if all(tr.indices(m).size for tr in traces)]
            cols = [metrics.s_intra(traces, m) for m in mods]
            rows = [(l, *[c[l] for c in cols]) for l in range(len(cols[0]))]
            emit(args, digest, ("layer", *mods), rows)
        elif args.which == "s_cross":
            curve = metrics.s_cross(_pairs(traces))
            emit(args, digest, ("layer", "s_cross"), list(enumerate(curve)))
        else:
            rows = _ilvas_rows(traces, args, metrics)
            emit(args, digest, ("layer", "k", "n", "ilvas", "selected"), rows)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return EXIT_OK


def _ilvas_rows(traces, args, metrics):
    L = traces[0].num_layers
    ks = args.k or [5, 10, 20, 50, 100, 200]
    ns = args.n or [4, 8]

    def point(kn):
        # layers where the top-K set is defined and still live n layers later, in every trace
        k, n = kn
        layers, scores = [], []
        for layer in range(1, L - n + 1):
            try:
                scores.append(metrics.ilvas(traces, layer, n, k))
            except ValueError:
                continue
            layers.append(layer)
        if not layers:
            return k, n, None
        return k, n, metrics.IlvasCurve(np.array(layers), np.array(scores), n, k, metrics.EXACT)

    def aggregate(kn):
        k, n = kn
        parts = [point((k, o))[2] for o in range(1, n + 1)]
        if any(c is None for c in parts):
            return k, n, None
        common = sorted(set.intersection(*(set(c.layers.tolist()) for c in parts)))
        if not common:
            return k, n, None
        vals = [np.mean([c.value(l) for c in parts]) for l in common]
        return k, n, metrics.IlvasCurve(np.array(common), np.array(vals), n, k, metrics.AGGREGATE)

    grid = sorted((k, n) for k in ks for n in ns)
    work = aggregate if args.mode == metrics.AGGREGATE else point
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, grid))
    rows = []
    for k, n, curve in results:
        if curve is None:
            print(f"ilvas: skipped k={k}, n={n} (no layer with enough surviving vision tokens)",
                  file=sys.stderr)
            continue
        picked = set()
        window = tuple(args.window) if args.window else None
        try:
            picked = set(metrics.select_filter_layers(curve, window, valleys=args.valleys))
        except ValueError as exc:
            print(f"ilvas: no filter selection for k={k}, n={n}: {exc}", file=sys.stderr)
        rows += [(int(l), k, n, float(s), int(l) in picked) for l, s in zip(curve.layers, curve.scores)]
    if not rows:
        raise CliError("no ILVAS grid point could be evaluated on these traces")
    return rows


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    from hidrop.importance import SaliencyConfig
    from hidrop.layout import build_layout
    from hidrop.metrics import ilvas_curve
    from hidrop.pipeline import ToyModel, decoupled_prefill, forward, make_embeddings, plan_from_ilvas, to_trace
    from hidrop.schedule import ModelShape
    from hidrop.trace import write_traces

    cfg = _config(args)
    seed = cfg.seeds[0]
    shape = ModelShape(args.layers, args.hidden, args.ffn or 2 * args.hidden, args.heads)
    pe = cfg.pe_mode()
    layout = build_layout(args.system, args.n_v, args.text, pe)
    model = ToyModel.build(shape, seed=seed, vision_decay=args.vision_decay)
    emb = make_embeddings(layout, shape.hidden, seed)
    try:
        if args.plan_avg is not None:
            probe = forward(model, layout, emb, PruneSchedule.vanilla(args.n_v, shape.layers),
                            pe=pe, record_attention="text")
            curve = ilvas_curve([to_trace(probe, "probe")], range(1, shape.layers), args.ilvas_n, args.ilvas_k)
            sched = plan_from_ilvas(curve, args.inject, args.exit, args.n_v, args.plan_avg, shape.layers)
        elif args.schedule_file:
            sched = PruneSchedule.load(args.schedule_file)
        elif args.stages:
            sched = PruneSchedule(args.inject, args.exit, tuple(args.filters or ()), tuple(args.stages), args.n_v)
        else:
            sched = PruneSchedule.vanilla(args.n_v, shape.layers)
        scfg = SaliencyConfig(cfg.strategy)
        record = "text" if args.trace_out else None
        if args.decoupled:
            cost = CostModel(args.throughput, int(layout.non_vision.size), args.vision_path,
                             args.stage_overhead)
            result, log, _ = decoupled_prefill(model, layout, emb, sched, scfg, pe, cost, mode=args.mode,
                                               record_attention=record)
        else:
            result = forward(model, layout, emb, sched, scfg, pe, mode=args.mode, record_attention=record)
            log = None
    except (ValueError, ScheduleError) as exc:
        raise CliError(str(exc)) from None
    if args.trace_out:
        write_traces(args.trace_out, [to_trace(result, f"seed-{seed}")])
    counts = result.vision_counts()
    cost = CostModel(args.throughput, int(layout.non_vision.size), args.vision_path, args.stage_overhead)
    ser = prefill_latency(counts, shape, cost, SERIAL, sched.inject_layer, len(sched.filter_layers))
    dec = prefill_latency(counts, shape, cost, DECOUPLED, sched.inject_layer, len(sched.filter_layers))
    notes = [f"schedule: {json.dumps(sched.to_dict(), separators=(',', ':'))}",
             f"average_tokens: {float(np.mean(counts)):.6g}",
             f"latency_serial: {ser:.6g}", f"latency_decoupled: {dec:.6g}"]
    if log is not None:
        notes.append(f"parallel_text_layers: {log.parallel_layers}")
    rows = [(i, int(n)) for i, n in enumerate(counts, start=1)]
    digest = cfg.digest(cmd="simulate", schedule=sched.to_dict(), layers=args.layers, hidden=args.hidden,
                        heads=args.heads, n_v=args.n_v, text=args.text, system=args.system, mode=args.mode)
    emit(args, digest, ("layer", "n_vision"), rows, notes,
         {"average_tokens": float(np.mean(counts)), "latency_serial": ser, "latency_decoupled": dec})
    return EXIT_OK


# ------------------------------------------------------------------ verify


def cmd_verify(args) -> int:
    from hidrop import verify

    checks = verify.default_checks(range(args.seeds), golden_scale=1.1 if args.corrupt_golden else 1.0)
    only = set(args.only) if args.only else None
    if only:
        unknown = only - {c[0] for c in checks}
        if unknown:
            raise CliError(f"unknown check(s) {sorted(unknown)}")
    results = verify.run_checks(checks, only)
    width = max(len(r.name) for r in results)
    for r in results:
        line = f"{r.name:<{width}}  {r.status:<16}  max_err={r.max_error:.3e}  {r.seconds * 1e3:8.1f} ms"
        if r.detail and r.status != verify.PASS:
            line += f"  [{r.detail}]"
        print(line)
    if args.json:
        Path(args.json).write_text(json.dumps([r.__dict__ for r in results], indent=2, default=str) + "\n")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks ok")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hidrop", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, model=True, schedule=True):
        p.add_argument("--config", metavar="JSON", help="run configuration file")
        if model:
            p.add_argument("--model", help=f"model preset {sorted(presets.SHAPES)} (default llava-7b)")
        if schedule:
            p.add_argument("--schedule", help=f"schedule preset {list(presets.SCHEDULE_PRESETS)} or a JSON file")

    p = sub.add_parser("flops", help="per-layer vision tokens and FLOPs for a schedule")
    with_config(p)
    p.add_argument("--table", action="store_true", help="print a human-readable summary instead of CSV")
    _common_output(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep-ged", help="token-count curves of the GED family")
    with_config(p, schedule=False)
    p.add_argument("--p", type=_floats, help="comma-separated exponents (default 0.25,0.5,1,2)")
    p.add_argument("--n-v", type=int, default=576)
    p.add_argument("--first", type=int, default=1, help="first layer of the decay window")
    p.add_argument("--last", type=int, default=32, help="last layer of the decay window")
    p.add_argument("--r-end", type=float, default=None, help="final keep ratio (default 1/n_v)")
    _common_output(p)
    p.set_defaults(func=cmd_sweep_ged)

    p = sub.add_parser("schedule-plan", help="build a schedule from a budget or stage list")
    with_config(p)
    p.add_argument("--inject", type=int)
    p.add_argument("--exit", type=int)
    p.add_argument("--filters", type=_ints)
    p.add_argument("--avg", type=float, help="target average vision tokens per layer")
    p.add_argument("--stages", type=_ints, help="stage counts placed at evenly spaced layers")
    p.add_argument("--layers", type=int, help="model depth (default from --model)")
    p.add_argument("--n-v", type=int, default=576)
    p.add_argument("--out", metavar="PATH", help="save the schedule as JSON")
    _common_output(p)
    p.set_defaults(func=cmd_schedule_plan)

    p = sub.add_parser("metrics", help="layer-wise curves from trace files")
    with_config(p, schedule=False)
    p.add_argument("traces", nargs="+", help="JSON-lines trace files")
    p.add_argument("--which", choices=("s_intra", "s_cross", "ilvas"), default="s_intra")
    p.add_argument("--k", type=_ints, help="top-K grid for ilvas (default 5,10,20,50,100,200)")
    p.add_argument("--n", type=_ints, help="layer offsets for ilvas (default 4,8)")
    p.add_argument("--mode", choices=("exact", "aggregate"), default="exact")
    p.add_argument("--window", type=_ints, help="lo,hi layers for filter selection")
    p.add_argument("--valleys", action="store_true", help="select local minima instead of maxima")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    _common_output(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate", help="run the toy pipeline and report live vision tokens")
    with_config(p, model=False, schedule=False)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--ffn", type=int)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--n-v", type=int, default=576)
    p.add_argument("--system", type=int, default=4)
    p.add_argument("--text", type=_ints, default=[12, 8], help="text segment lengths")
    p.add_argument("--inject", type=int, default=9)
    p.add_argument("--exit", type=int, default=25)
    p.add_argument("--filters", type=_ints)
    p.add_argument("--stages", type=_ints)
    p.add_argument("--schedule-file")
    p.add_argument("--plan-avg", type=float, help="pick filter layers by ILVAS and plan this average")
    p.add_argument("--ilvas-k", type=int, default=20)
    p.add_argument("--ilvas-n", type=int, default=1)
    p.add_argument("--pe", choices=("persistent", "compacted", "group"))
    p.add_argument("--strategy")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("removal", "masking"), default="removal")
    p.add_argument("--vision-decay", type=float, default=0.0)
    p.add_argument("--decoupled", action="store_true", help="feed vision KV from a separate lane")
    p.add_argument("--throughput", type=float, default=1e12, help="FLOP per time unit for latency")
    p.add_argument("--vision-path", type=float, default=0.0, help="encoder + projector time")
    p.add_argument("--stage-overhead", type=float, default=0.0, help="time per filter stage")
    p.add_argument("--trace-out", metavar="PATH", help="write the run as a trace file")
    _common_output(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the invariant and golden checks")
    p.add_argument("--seeds", type=int, default=20, help="random instances per randomized check")
    p.add_argument("--only", type=lambda s: s.split(","), help="comma-separated check names")
    p.add_argument("--corrupt-golden", action="store_true", help="negative control: perturb a FLOPs golden")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"hidrop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
