"""Result tables: task scores, benchmark averages, signed deltas and best-run selection.

A task reported with two metrics (F1 and EM) contributes their mean to the
row average. Display values are rounded half away from zero to one decimal;
the ``data`` rendering keeps full precision.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

XTREME_TASKS = ("xnli", "pawsx", "pos", "ner", "xquad", "mlqa", "tydiqa", "bucc", "tatoeba")
DATA_SCHEMA_VERSION = 1


@dataclass
class TaskResult:
    task: str
    values: dict                    # metric -> {language: value}
    split: str = "test"

    @classmethod
    def from_means(cls, task, means: dict, split="test"):
        return cls(task, {m: {"mean": float(v)} for m, v in means.items()}, split)

    def metric_means(self) -> dict:
        out = {}
        for metric, per_lang in self.values.items():
            vals = [v for v in per_lang.values() if v is not None]
            if not vals:
                raise ValueError(f"{self.task}/{metric}: no language has a value")
            out[metric] = float(np.mean(vals))
        return out


def task_score(result: TaskResult) -> float:
    """Single metric: its language mean. Two metrics: the mean of both language means."""
    means = result.metric_means()
    if not 1 <= len(means) <= 2:
        raise ValueError(f"{result.task}: expected 1 or 2 metrics, got {len(means)}")
    return float(sum(means.values()) / len(means))


@dataclass
class BenchmarkRow:
    label: str
    scores: dict
    average: float


def _as_results(results):
    if isinstance(results, dict):
        return dict(results)
    return {r.task: r for r in results}


def benchmark_average(results, label="", tasks=XTREME_TASKS) -> BenchmarkRow:
    """Average the task scores of one model; ``tasks=None`` accepts any non-empty task set."""
    results = _as_results(results)
    if tasks is not None:
        missing = [t for t in tasks if t not in results]
        extra = [t for t in results if t not in tasks]
        if missing or extra:
            raise ValueError(f"benchmark row needs exactly {list(tasks)}; missing {missing}, unexpected {extra}")
        order = list(tasks)
    else:
        if not results:
            raise ValueError("no task results")
        order = list(results)
    scores = {t: task_score(results[t]) for t in order}
    return BenchmarkRow(label, scores, float(np.mean(list(scores.values()))))


@dataclass
class DeltaRow:
    label: str
    deltas: dict          # task -> {metric: delta}
    score_deltas: dict    # task -> delta of the combined task score
    average: float
    provenance: dict = field(default_factory=dict)


@dataclass
class DeltaTable:
    tasks: list
    metrics: dict                 # task -> [metric, ...]
    baseline_label: str
    baseline: dict                # task -> {metric: value}
    baseline_scores: dict
    baseline_average: float
    rows: list
    baseline_provenance: dict = field(default_factory=dict)


def delta_table(baseline, runs: dict, baseline_label="baseline", provenance=None) -> DeltaTable:
    """Signed metric-wise differences of every run against the baseline.

    ``runs`` maps a run label to its task results. Each row's average is
    taken over the per-task combined-score deltas.
    """
    provenance = provenance or {}
    base = _as_results(baseline)
    tasks = list(base)
    metrics = {t: list(base[t].metric_means()) for t in tasks}
    base_means = {t: base[t].metric_means() for t in tasks}
    base_scores = {t: task_score(base[t]) for t in tasks}
    rows = []
    for label, run in runs.items():
        run = _as_results(run)
        if set(run) != set(tasks):
            raise ValueError(f"run {label!r} covers {sorted(run)} but baseline covers {sorted(tasks)}")
        deltas, score_deltas = {}, {}
        for t in tasks:
            means = run[t].metric_means()
            if set(means) != set(metrics[t]):
                raise ValueError(f"run {label!r}, task {t}: metrics {sorted(means)} != {sorted(metrics[t])}")
            deltas[t] = {m: means[m] - base_means[t][m] for m in metrics[t]}
            score_deltas[t] = task_score(run[t]) - base_scores[t]
        rows.append(DeltaRow(label, deltas, score_deltas, float(np.mean(list(score_deltas.values()))),
                             dict(provenance.get(label, {}))))
    return DeltaTable(tasks, metrics, baseline_label, base_means, base_scores,
                      float(np.mean(list(base_scores.values()))), rows,
                      dict(provenance.get(baseline_label, {})))


@dataclass
class Selection:
    run: str
    score: float
    tie: bool = False
    eval_split_flag: bool = False


def select_best(dev_results: dict) -> dict:
    """Per task, the run with the highest dev task score.

    Ties go to the lexicographically first run label and are flagged.
    Results scored on a split other than ``dev`` are flagged too.
    """
    tasks = sorted({t for res in dev_results.values() for t in _as_results(res)})
    out = {}
    for t in tasks:
        cands = []
        for label in sorted(dev_results):
            res = _as_results(dev_results[label])
            if t in res:
                cands.append((label, task_score(res[t]), res[t].split != "dev"))
        best = max(c[1] for c in cands)
        winners = [c for c in cands if c[1] == best]
        label, score, flag = winners[0]
        out[t] = Selection(label, score, len(winners) > 1, flag)
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def round_half_away(x, places=1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def fmt_value(x, signed=False) -> str:
    r = round_half_away(x)
    if r == 0:
        r = 0.0  # no "-0.0"
    return f"{r:+.1f}" if signed else f"{r:.1f}"


def _cell(values: dict, metrics, signed):
    return " / ".join(fmt_value(values[m], signed) for m in metrics)


def render(table: DeltaTable, format="plain") -> str:
    if format == "data":
        return json.dumps({"schema_version": DATA_SCHEMA_VERSION, "kind": "delta_table", **asdict(table)},
                          indent=1, sort_keys=True)
    header = ["model"] + [f"{t} ({' / '.join(table.metrics[t])})" for t in table.tasks] + ["Avg."]
    lines = [[table.baseline_label] + [_cell(table.baseline[t], table.metrics[t], False) for t in table.tasks]
             + [fmt_value(table.baseline_average)]]
    for row in table.rows:
        lines.append([row.label] + [_cell(row.deltas[t], table.metrics[t], True) for t in table.tasks]
                     + [fmt_value(row.average, True)])
    if format == "markdown":
        out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        out += ["| " + " | ".join(r) + " |" for r in lines]
        return "\n".join(out) + "\n"
    if format == "plain":
        widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines]) + "\n"
    raise ValueError(f"unknown render format {format!r}")


def parse_data(text) -> DeltaTable:
    d = json.loads(text)
    if d.get("schema_version") != DATA_SCHEMA_VERSION or d.get("kind") != "delta_table":
        raise ValueError("not a delta table data file of a supported schema version")
    d = {k: v for k, v in d.items() if k not in ("schema_version", "kind")}
    d["rows"] = [DeltaRow(**r) for r in d["rows"]]
    return DeltaTable(**d)


def parse_plain(text) -> dict:
    """Displayed numbers of a ``plain`` rendering: {row label: [floats in column order]}."""
    lines = [l for l in text.splitlines() if l.strip()]
    out = {}
    for line in lines[2:]:
        cells = [c for c in line.split("  ") if c.strip()]
        label, rest = cells[0].strip(), cells[1:]
        vals = []
        for c in rest:
            vals.extend(float(v) for v in c.split(" / "))
        out[label] = vals
    return out


def results_from_manifest(manifest: dict, split="test") -> dict:
    """Task results from a run manifest's target metrics.

    Tasks with no records on ``split`` fall back to their evaluation split
    (recorded on the result so selection can flag it).
    """
    out = {}
    for task, target in manifest.get("targets", {}).items():
        recs = target.get("metrics", [])
        chosen = [r for r in recs if r.get("split") == split]
        used = split
        if not chosen:
            used = target.get("eval_split", "test")
            chosen = [r for r in recs if r.get("split") == used]
        values = {}
        for r in chosen:
            values.setdefault(r["metric"], {})[r["language"]] = r["value"]
        if values:
            out[task] = TaskResult(task, values, used)
    return out
