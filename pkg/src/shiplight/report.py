"""Stage timing reports and mode comparison.

One mode report aggregates a set of runs into seven metrics: mean stage
duration for the two builds, packaging and the two deploys, plus the
coordinator's peak CPU and peak memory. Two reports with different mode
labels join into a comparison whose improvement column is
``(local - light) / local`` rounded to whole percent. JSON output is
deterministic: sorted keys, durations fixed to two decimals.
"""

from __future__ import annotations

import json
from pathlib import Path
from statistics import mean

from .model import Stage

METRICS = (
    ("build_backend_s", "stage", Stage.BUILD_BACKEND),
    ("build_frontend_s", "stage", Stage.BUILD_FRONTEND),
    ("package_s", "stage", Stage.PACKAGE),
    ("deploy_frontend_s", "stage", Stage.DEPLOY_FRONTEND),
    ("deploy_backend_s", "stage", Stage.DEPLOY_BACKEND),
    ("controller_cpu_peak_pct", "resource", "cpu_peak_pct"),
    ("controller_ram_peak_mb", "resource", "ram_peak_mb"),
)


def load_run_record(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def build_mode_report(run_records: list[dict], mode_label: str) -> dict:
    """Aggregate terminal run records (parsed run.json documents) into one
    labeled report."""
    rows = []
    for metric, source, key in METRICS:
        values = []
        for record in run_records:
            if source == "stage":
                for report in record.get("reports", []):
                    if report["stage"] == key.value and \
                            report["outcome"] != "skipped":
                        values.append(report["duration_s"])
            else:
                resources = record.get("resources", {})
                if key in resources:
                    values.append(resources[key])
        value = round(mean(values), 2) if values else 0.0
        rows.append({"metric": metric, "value": value})
    cpu_times = [r.get("resources", {}).get("cpu_time_s") for r in run_records]
    cpu_times = [c for c in cpu_times if c is not None]
    return {
        "mode": mode_label,
        "runs": len(run_records),
        "rows": rows,
        "cpu_time_s": round(mean(cpu_times), 3) if cpu_times else 0.0,
    }


def compare_reports(local: dict, light: dict) -> dict:
    """Join two mode reports; improvement is relative to the local mode."""
    light_by_metric = {row["metric"]: row["value"] for row in light["rows"]}
    rows = []
    for row in local["rows"]:
        metric = row["metric"]
        local_value = row["value"]
        light_value = light_by_metric.get(metric, 0.0)
        if local_value > 0:
            improvement = round((local_value - light_value) / local_value * 100)
        else:
            improvement = 0
        rows.append({
            "metric": metric,
            "local": round(local_value, 2),
            "light": round(light_value, 2),
            "improvement_pct": improvement,
        })
    return {"modes": [local["mode"], light["mode"]], "rows": rows}


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_table(report: dict) -> str:
    """Fixed-width human rendering of a mode report or a comparison."""
    lines = []
    if "modes" in report:
        lines.append(f"{'Metric':<28} {'Local':>12} {'Light':>12} {'Improvement':>12}")
        lines.append("-" * 68)
        for row in report["rows"]:
            lines.append(
                f"{row['metric']:<28} {row['local']:>12.2f} "
                f"{row['light']:>12.2f} {row['improvement_pct']:>11}%"
            )
    else:
        lines.append(f"Mode: {report['mode']}  (runs: {report['runs']})")
        lines.append(f"{'Metric':<28} {'Value':>12}")
        lines.append("-" * 42)
        for row in report["rows"]:
            lines.append(f"{row['metric']:<28} {row['value']:>12.2f}")
    return "\n".join(lines) + "\n"
