"""Turn raw cell artifacts into metrics, comparison tables, plots and a
reproduction manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

from .aggregator import PodMeta, attribute_energy, build_timelines, default_sut_selector, write_timelines_csv
from .collectors import coverage, read_trace
from .metrics import FnInvocation, MetricsReport, compute_report, format_decimal
from .model import ExperimentPlan, LayerTag, plan_to_dict
from .workloads import load_request_log

# metric key -> (label, lower is better)
METRICS = {
    "wr": ("WR [J/req]", True),
    "ro": ("RO", True),
    "ru": ("RU", False),
    "re": ("RE [J]", True),
    "ac": ("AC [J]", True),
    "tc": ("TC", True),
    "consumed_cost": ("Consumed", True),
    "cost_per_kilorequest": ("Per 1000 req [¢]", True),
    "fr": ("FR [%]", True),
    "rqs": ("Rqs [req/s]", False),
    "lat_p50": ("Lat p50 [s]", True),
    "lat_p95": ("Lat p95 [s]", True),
}
CSV_HEADER = ["metric", "workload", "variant", "n", "mean", "min", "max", "mark", "tie"]


# --- per-cell compilation ------------------------------------------------------


def _pod_meta(doc: dict) -> dict[str, PodMeta]:
    out = {}
    for pod, m in doc.get("pods", {}).items():
        out[pod] = PodMeta(m["node"], m["service"], LayerTag(m["layer"]), m.get("deploy_kind", "pod"),
                           m.get("cpu_limit"), m.get("mem_limit"),
                           tuple((e, float(t)) for e, t in m.get("lifecycle", [])))
    return out


def topology_doc(pods: dict[str, PodMeta], node_ceilings=None, loadgen_node=None) -> dict:
    """JSON form of a pod map, as stored in ``topology.json``."""
    return {
        "pods": {p: {"node": m.node, "service": m.service, "layer": LayerTag(m.layer).value,
                     "deploy_kind": m.deploy_kind, "cpu_limit": m.cpu_limit, "mem_limit": m.mem_limit,
                     "lifecycle": [[e, t] for e, t in m.lifecycle]}
                 for p, m in sorted(pods.items())},
        "node_ceilings": dict(sorted((node_ceilings or {}).items())),
        "loadgen_node": loadgen_node,
    }


def _lifetimes(pods, window):
    out = {}
    for p, m in pods.items():
        life = m.lifetime()
        if life is not None:
            out[p] = (life[0], life[1] if life[1] is not None else window[1])
    return out


def energy_coverage_of(samples, window, lifetimes):
    """Raw-sample coverage per sample kind; the minimum is what gates a run."""
    kinds = sorted({s.kind for s in samples}, key=lambda k: k.value)
    return {k.value: coverage([s for s in samples if s.kind is k], window, lifetimes) for k in kinds}


@dataclass
class CellResult:
    report: MetricsReport
    timelines: list
    ledger: object
    kind_coverage: dict
    warnings: list = field(default_factory=list)
    custom: dict = field(default_factory=dict)  # (entity, unit) -> mean value


def compile_cell(cell_dir, plan: ExperimentPlan, variant: str, workload: str, repetition: int) -> CellResult:
    """Recompute one cell's metrics from its raw artifacts."""
    d = Path(cell_dir)
    run = json.loads((d / "run.json").read_text(encoding="utf-8"))
    window = (float(run["window"][0]), float(run["window"][1]))
    normal = (window[0] + plan.ramp, window[1]) if plan.ramp < window[1] - window[0] else window
    topo = json.loads((d / "topology.json").read_text(encoding="utf-8"))
    pods = _pod_meta(topo)
    exclude = (topo["loadgen_node"],) if topo.get("loadgen_node") else ()
    samples = read_trace(d / "samples.csv")
    requests = load_request_log(d / "requests.csv")
    specs = {}
    for v in plan.variants:
        if v.name == variant:
            specs = dict(v.resource_specs)
    timelines, stats = build_timelines(samples, pods, window, plan.cleaning, exclude,
                                       topo.get("node_ceilings") or None)
    selector = default_sut_selector(plan.infra_prefixes)
    ledger = attribute_energy(timelines, selector, exclude)
    kinds = energy_coverage_of(samples, window, _lifetimes(pods, window))
    fn = [FnInvocation(*row) for row in run.get("fn_invocations", [])]
    report = compute_report(
        variant=variant, workload=workload, repetition=repetition, timelines=timelines, ledger=ledger,
        requests=requests, window=window, rule=plan.overprovision, book=plan.cost_book, aux=plan.aux_model,
        fn_invocations=fn, bytes_tx=float(run.get("bytes_tx", 0.0)), specs=specs, sut_selector=selector,
        normal_window=normal, collector_coverage=min(kinds.values()) if kinds else 0.0,
        outliers_removed=stats.removed)
    notes = list(ledger.warnings)
    if stats.colocated_loadgen:
        notes.append("load generator shares a node with SUT replicas")
    return CellResult(report, timelines, ledger, kinds, notes, dict(stats.custom))


def export_cell(cell_dir, result: CellResult):
    d = Path(cell_dir)
    with open(d / "timelines.csv", "w", encoding="utf-8", newline="") as fh:
        write_timelines_csv(result.timelines, fh)
    (d / "metrics.json").write_text(result.report.to_json(), encoding="utf-8")
    notes = {
        "warnings": result.warnings,
        "coverage_by_kind": {k: float(format_decimal(v)) for k, v in sorted(result.kind_coverage.items())},
        # free-form useful-work samples: reported as means, never aggregated into metrics
        "custom": [{"entity": e, "unit": u, "mean": float(format_decimal(v))}
                   for (e, u), v in sorted(result.custom.items())],
    }
    (d / "notes.json").write_text(json.dumps(notes, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _cell_notes(root: Path, cells) -> str:
    warn, custom = [], []
    for cell in cells:
        p = root / cell / "notes.json"
        if not p.exists():
            continue
        doc = json.loads(p.read_text(encoding="utf-8"))
        warn += [f"- {cell}: {w}" for w in doc.get("warnings", [])]
        custom += [f"| {cell} | {c['entity']} | {c['unit']} | {format_decimal(c['mean'], 4)} |"
                   for c in doc.get("custom", [])]
    out = ""
    if warn:
        out += "\nNotes:\n\n" + "\n".join(warn) + "\n"
    if custom:
        out += ("\nCustom metrics (mean per run, not ranked):\n\n| Cell | Entity | Unit | Mean |\n|---|---|---|---:|\n"
                + "\n".join(custom) + "\n")
    return out


# --- comparison -------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    n: int
    mean: float | None
    lo: float | None
    hi: float | None


@dataclass
class ComparisonTable:
    variants: list[str]
    workloads: list[str]
    metrics: list[str]
    cells: dict = field(default_factory=dict)  # (metric, workload, variant) -> Cell
    marks: dict = field(default_factory=dict)  # (metric, workload) -> (best, worst, tie)

    def mark_of(self, metric, workload, variant):
        m = self.marks.get((metric, workload))
        if not m:
            return ""
        if variant == m[0]:
            return "best"
        if variant == m[1]:
            return "worst"
        return ""


def _mark(values: dict, lower_better: bool):
    """Best and worst variant for one column; ties go to the first and last
    variant name respectively and are flagged."""
    have = {v: x for v, x in values.items() if x is not None}
    if len(have) < 2:
        return None
    lo, hi = min(have.values()), max(have.values())
    good, bad = (lo, hi) if lower_better else (hi, lo)
    best_names = sorted(v for v, x in have.items() if x == good)
    worst_names = sorted(v for v, x in have.items() if x == bad)
    best, worst = best_names[0], worst_names[-1]
    tie = len(best_names) > 1 or len(worst_names) > 1
    return best, worst, tie


def build_table(reports, metrics=tuple(METRICS)) -> ComparisonTable:
    """Mean, min and max over repetitions per (metric, workload, variant)."""
    reports = sorted(reports, key=lambda r: (r.variant, r.workload, r.repetition))
    variants = sorted({r.variant for r in reports})
    workloads = sorted({r.workload for r in reports})
    table = ComparisonTable(variants, workloads, list(metrics))
    for metric in metrics:
        for wl in workloads:
            means = {}
            for v in variants:
                vals = [getattr(r, metric) for r in reports if r.variant == v and r.workload == wl]
                if not vals and not any(r.variant == v and r.workload == wl for r in reports):
                    continue
                got = [x for x in vals if x is not None]
                cell = (Cell(len(got), math.fsum(got) / len(got), min(got), max(got)) if got
                        else Cell(0, None, None, None))
                table.cells[(metric, wl, v)] = cell
                means[v] = cell.mean
            m = _mark(means, METRICS[metric][1])
            if m:
                table.marks[(metric, wl)] = m
    return table


# --- rendering --------------------------------------------------------------------


def _num(x):
    return "" if x is None else repr(float(x))


def _display(metric, x):
    if x is None:
        return "n/a"
    if metric == "fr":
        return format_decimal(100.0 * x, 4)
    if metric == "cost_per_kilorequest":
        return f"{x:.2f}"
    return format_decimal(x, 4)


def _cell_text(metric, cell: Cell):
    if cell.mean is None:
        return "n/a"
    s = _display(metric, cell.mean)
    if cell.n > 1:
        s += f" ({_display(metric, cell.lo)} - {_display(metric, cell.hi)})"
    return s


def render_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for metric in table.metrics:
        for wl in table.workloads:
            for v in table.variants:
                c = table.cells.get((metric, wl, v))
                if c is None:
                    continue
                tie = table.marks.get((metric, wl), (None, None, False))[2]
                w.writerow([metric, wl, v, c.n, _num(c.mean), _num(c.lo), _num(c.hi),
                            table.mark_of(metric, wl, v), int(bool(tie))])
    return buf.getvalue()


def parse_csv(text: str) -> ComparisonTable:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("not a comparison CSV")
    metrics, workloads, variants = [], [], []
    cells, marks = {}, {}

    def f(s):
        return None if s == "" else float(s)

    for metric, wl, v, n, mean, lo, hi, mark, tie in rows[1:]:
        for seq, x in ((metrics, metric), (workloads, wl), (variants, v)):
            if x not in seq:
                seq.append(x)
        cells[(metric, wl, v)] = Cell(int(n), f(mean), f(lo), f(hi))
        if mark:
            best, worst, _ = marks.get((metric, wl), (None, None, False))
            if mark == "best":
                best = v
            else:
                worst = v
            marks[(metric, wl)] = (best, worst, tie == "1")
    return ComparisonTable(sorted(variants), sorted(workloads), metrics, cells, marks)


def render_markdown(table: ComparisonTable) -> str:
    lines = []
    for wl in table.workloads:
        lines.append(f"### {wl}")
        lines.append("")
        lines.append("| Variant | " + " | ".join(METRICS[m][0] for m in table.metrics) + " |")
        lines.append("|---|" + "---:|" * len(table.metrics))
        for v in table.variants:
            row = []
            for m in table.metrics:
                c = table.cells.get((m, wl, v))
                text = "" if c is None else _cell_text(m, c)
                mark = table.mark_of(m, wl, v)
                if mark == "best":
                    text = f"**{text}**"
                elif mark == "worst":
                    text = f"_{text}_"
                row.append(text)
            lines.append(f"| {v} | " + " | ".join(row) + " |")
        ties = [m for m in table.metrics if table.marks.get((m, wl), (0, 0, False))[2]]
        if ties:
            lines.append("")
            lines.append("Ties broken by variant name: " + ", ".join(ties) + ".")
        lines.append("")
    lines.append("Bold marks the best variant per column, italics the worst. "
                 "Ranges are min - max over repetitions.")
    return "\n".join(lines) + "\n"


def render_merged(table: ComparisonTable, first: str, second: str) -> str:
    """One markdown table with ``first - second`` means per cell, the layout
    of a results table that pairs two workloads per column."""
    for wl in (first, second):
        if wl not in table.workloads:
            raise ValueError(f"unknown workload {wl!r}")
    lines = [f"### {first} - {second}", "",
             "| Variant | " + " | ".join(METRICS[m][0] for m in table.metrics) + " |",
             "|---|" + "---:|" * len(table.metrics)]
    for v in table.variants:
        row = []
        for m in table.metrics:
            parts = []
            for wl in (first, second):
                c = table.cells.get((m, wl, v))
                text = "n/a" if c is None or c.mean is None else _display(m, c.mean)
                mark = table.mark_of(m, wl, v)
                if mark == "best":
                    text = f"**{text}**"
                elif mark == "worst":
                    text = f"_{text}_"
                parts.append(text)
            row.append(" - ".join(parts))
        lines.append(f"| {v} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def render_text(table: ComparisonTable) -> str:
    out = []
    for wl in table.workloads:
        out.append(f"[{wl}]")
        width = max([len(v) for v in table.variants] + [7])
        for m in table.metrics:
            out.append(f"  {METRICS[m][0]}")
            for v in table.variants:
                c = table.cells.get((m, wl, v))
                if c is None:
                    continue
                mark = table.mark_of(m, wl, v)
                out.append(f"    {v:<{width}}  {_cell_text(m, c)}" + (f"  <{mark}>" if mark else ""))
    return "\n".join(out) + "\n"


def render_plots(table: ComparisonTable, out_dir) -> list[Path]:
    """Per-workload WR bars and stacked SUT/overhead energy bars, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ecoharness"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for wl in table.workloads:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        vs = [v for v in table.variants if (c := table.cells.get(("wr", wl, v))) and c.mean is not None]
        means = [table.cells[("wr", wl, v)].mean for v in vs]
        err = [[m - table.cells[("wr", wl, v)].lo for v, m in zip(vs, means)],
               [table.cells[("wr", wl, v)].hi - m for v, m in zip(vs, means)]]
        ax.bar(vs, means, yerr=err if vs else None, color="#4c72b0", capsize=3)
        ax.set_ylabel("J per request")
        ax.set_title(f"WR - {wl}")
        fig.tight_layout()
        p = out / f"wr_{wl}.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths


def render_energy_split(reports, out_dir) -> Path:
    """Stacked SUT and overhead joules (mean over repetitions) per variant and workload."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ecoharness"
    groups: dict[tuple, list] = {}
    for r in sorted(reports, key=lambda r: (r.workload, r.variant, r.repetition)):
        groups.setdefault((r.workload, r.variant), []).append(r)
    labels = [f"{v}\n{w}" for w, v in groups]
    sut = [math.fsum(r.total_sut_energy for r in g) / len(g) for g in groups.values()]
    over = [math.fsum(r.total_overhead_energy for r in g) / len(g) for g in groups.values()]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    ax.bar(labels, sut, label="SUT", color="#55a868")
    ax.bar(labels, over, bottom=sut, label="overhead", color="#c44e52")
    ax.set_ylabel("J")
    ax.legend()
    fig.tight_layout()
    p = Path(out_dir) / "energy_split.svg"
    fig.savefig(p, format="svg", metadata={"Date": None})
    plt.close(fig)
    return p


# --- run-level outputs ---------------------------------------------------------------


def digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tool_versions() -> dict:
    import matplotlib
    import numpy
    import pydantic

    from . import __version__
    from ._jit import USE_NUMBA

    numba_version = None
    if USE_NUMBA:
        import numba

        numba_version = numba.__version__
    return {"python": platform.python_version(), "ecoharness": __version__, "numpy": numpy.__version__,
            "numba": numba_version, "pydantic": pydantic.__version__,
            "matplotlib": matplotlib.__version__}


def load_reports(run_dir) -> tuple[list[MetricsReport], list[str]]:
    """Every ``metrics.json`` under ``run_dir`` plus the cells that lack one."""
    root = Path(run_dir)
    reports, gaps = [], []
    for cell in sorted(json.loads((root / "cells.json").read_text(encoding="utf-8"))):
        p = root / cell / "metrics.json"
        if p.exists():
            reports.append(MetricsReport.from_json(p.read_text(encoding="utf-8")))
        else:
            gaps.append(cell)
    return reports, gaps


def write_outputs(run_dir, plan: ExperimentPlan, history: dict, seeds: dict, descriptors: dict) -> dict:
    """Comparison tables, plots and ``manifest.json`` for a finished run."""
    root = Path(run_dir)
    reports, gaps = load_reports(root)
    table = build_table(reports)
    md = render_markdown(table)
    if gaps:
        md += "\nMissing cells: " + ", ".join(gaps) + "\n"
    md += _cell_notes(root, json.loads((root / "cells.json").read_text(encoding="utf-8")))
    (root / "comparison.md").write_text(md, encoding="utf-8")
    (root / "comparison.csv").write_text(render_csv(table), encoding="utf-8")
    (root / "comparison.txt").write_text(render_text(table), encoding="utf-8")
    plots = render_plots(table, root / "plots")
    if reports:
        plots.append(render_energy_split(reports, root / "plots"))
    artifacts = {}
    for cell in sorted(json.loads((root / "cells.json").read_text(encoding="utf-8"))):
        d = root / cell
        if d.is_dir():
            for f in sorted(d.iterdir()):
                if f.is_file():
                    artifacts[f"{cell}/{f.name}"] = digest(f)
    for f in ("comparison.md", "comparison.csv", "plan.yaml"):
        artifacts[f] = digest(root / f)
    manifest = {
        "plan": plan_to_dict(plan),
        "descriptors": descriptors,
        "collectors": [c.model_dump(mode="json") for c in plan.collectors],
        "seeds": seeds,
        "tools": tool_versions(),
        "artifacts": artifacts,
        "history": history,
        "missing_cells": gaps,
        "plots": [str(p.relative_to(root)) for p in plots],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return manifest


__all__ = [
    "CellResult", "ComparisonTable", "Cell", "METRICS", "build_table", "compile_cell", "export_cell",
    "parse_csv", "render_csv", "render_markdown", "render_merged", "render_text", "render_plots", "write_outputs",
    "topology_doc", "load_reports",
]


def render(table: ComparisonTable, fmt: str, out_dir=None):
    """Render ``table`` as ``text``, ``markdown``, ``csv`` or ``svg`` (files
    written to ``out_dir``)."""
    if fmt == "text":
        return render_text(table)
    if fmt == "markdown":
        return render_markdown(table)
    if fmt == "csv":
        return render_csv(table)
    if fmt == "svg":
        return render_plots(table, out_dir or ".")
    raise ValueError(f"unknown format {fmt!r}")

