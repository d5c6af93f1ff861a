"""Tables and boxplot figures from stored validation reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .validation import QUANTILE_FIELDS, Quantiles, ValidationReport  # noqa: E402

# metric name -> (axis label, extractor over a report)
METRICS = {
    "voltage_diff": ("|dV| (p.u.)", lambda r: list(r.voltage_diff.values())),
    "cumulative_r": ("cumulative R error (%)", lambda r: [v[0] for v in r.cumulative.values()]),
    "cumulative_x": ("cumulative X error (%)", lambda r: [v[1] for v in r.cumulative.values()]),
    "se_objective": ("SE objective per step", lambda r: list(r.se_objective.values())),
}


def load_runs(path: str | Path) -> dict[str, ValidationReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    runs = data.get("runs", {"run": data})
    return {label: ValidationReport.from_dict(d) for label, d in runs.items()}


def save_runs(runs: dict[str, ValidationReport], path: str | Path, extra: dict | None = None) -> None:
    doc = {"runs": {label: r.to_dict() for label, r in runs.items()}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def quantile_table(runs: dict[str, ValidationReport]) -> list[dict]:
    rows = []
    for label, rep in runs.items():
        for metric, (_, values) in METRICS.items():
            vals = values(rep)
            if not vals:
                continue
            rows.append({"run": label, "metric": metric, **Quantiles.of(vals).as_dict()})
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_tables(runs: dict[str, ValidationReport], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir) / "tables"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    q = out / "quantiles.csv"
    header = ["run", "metric", *QUANTILE_FIELDS, "count"]
    _write_csv(q, header, [[r[h] for h in header] for r in quantile_table(runs)])
    paths.append(q)
    v = out / "voltage_diff.csv"
    _write_csv(v, ["run", "bus", "phase", "step", "dv_pu"],
               [[lab, b, p, t, val] for lab, rep in runs.items() for (b, p, t), val in sorted(rep.voltage_diff.items())])
    paths.append(v)
    c = out / "cumulative_error.csv"
    _write_csv(c, ["run", "user", "phase", "dr_pct", "dx_pct"],
               [[lab, u, p, r, x] for lab, rep in runs.items() for (u, p), (r, x) in sorted(rep.cumulative.items())])
    paths.append(c)
    s = out / "se_objective.csv"
    _write_csv(s, ["run", "step", "objective"],
               [[lab, t, val] for lab, rep in runs.items() for t, val in sorted(rep.se_objective.items())])
    paths.append(s)
    return paths


def write_figures(runs: dict[str, ValidationReport], out_dir: str | Path) -> list[Path]:
    """One boxplot per metric with a box per run; SVG output is byte-stable for identical input."""
    out = Path(out_dir) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with plt.rc_context({"svg.hashsalt": "impest", "svg.fonttype": "none"}):
        for metric, (label, values) in METRICS.items():
            data = {run: values(rep) for run, rep in runs.items()}
            data = {k: v for k, v in data.items() if v}
            if not data:
                continue
            fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(data) + 2), 3.5))
            ax.boxplot(list(data.values()), whis=(0, 100))
            ax.set_xticks(range(1, len(data) + 1), list(data.keys()))
            ax.set_ylabel(label)
            ax.grid(axis="y", alpha=0.3)
            fig.tight_layout()
            path = out / f"{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
            paths.append(path)
    return paths


def build_report(report_json: str | Path, out_dir: str | Path) -> list[Path]:
    runs = load_runs(report_json)
    return write_tables(runs, out_dir) + write_figures(runs, out_dir)
