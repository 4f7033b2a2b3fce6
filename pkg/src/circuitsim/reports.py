"""Plain-text tables and plot-ready column files from run artifacts.

No plotting here: consumers are scripts, so everything is CSV columns and
fixed-width text.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

from .adversary import boxplot_stats
from .harness import cell_label, load_manifest, load_streams, load_summary, sweep_cells
from .traffic import cdf_points

# Median deltas reported by the full-scale evaluation campaign (whole-network
# runs on a measured Internet topology). Desk-scale runs reproduce direction,
# not magnitude; the report embeds these for side-by-side comparison.
REFERENCE_FULL_SCALE = (
    ("rtt_only", 3, "car", -15.0, -9.0),
    ("rtt_only", 5, "car", -22.0, -12.0),
    ("rtt_only", 3, "vanilla", -22.0, -13.8),
    ("rtt_only", 5, "vanilla", -27.0, -16.0),
)


def _warmup_s(run_dir) -> float:
    manifest = load_manifest(run_dir)
    cfg = manifest["config"]
    return float(cfg.get("duration_s", 0)) * float(cfg.get("warmup_fraction", 1 / 3))


def seed_medians(run_dir, kind: str = "web") -> Optional[dict]:
    """Median TTFB/TTLB of one run for one client kind, from its summary."""
    summary = load_summary(run_dir)
    entry = summary.get("kinds", {}).get(kind)
    if not entry or "ttfb" not in entry:
        return None
    return {"ttfb": entry["ttfb"]["median"], "ttlb": entry["ttlb"]["median"]}


def cell_medians(run_dirs: Sequence, kind: str = "web") -> Optional[dict]:
    """Across-seed medians of the per-seed medians."""
    ttfb, ttlb = [], []
    for d in run_dirs:
        m = seed_medians(d, kind)
        if m is not None:
            ttfb.append(m["ttfb"])
            ttlb.append(m["ttlb"])
    if not ttfb:
        return None
    return {"ttfb": median(ttfb), "ttlb": median(ttlb), "seeds": len(ttfb)}


def _delta_pct(value: float, base: float) -> float:
    return (value - base) / base * 100.0


def comparison_table(sweep_results: dict, kind: str = "web") -> tuple:
    """Rows of (label, seeds, ttfb, ttlb, deltas vs car/vanilla) plus text."""
    cells = {}
    for (strategy, n), res in sweep_results.items():
        medians = cell_medians(res["dirs"], kind)
        if medians is not None:
            cells[(strategy, n)] = medians

    baselines = {s: cells.get((s, None)) for s in ("car", "vanilla")}
    rows = []
    for (strategy, n), m in cells.items():
        row = {
            "strategy": strategy,
            "circuits": n,
            "seeds": m["seeds"],
            "median_ttfb_s": round(m["ttfb"], 6),
            "median_ttlb_s": round(m["ttlb"], 6),
        }
        for base_name in ("car", "vanilla"):
            base = baselines.get(base_name)
            if base and (strategy, n) != (base_name, None):
                row[f"ttfb_vs_{base_name}_pct"] = round(_delta_pct(m["ttfb"], base["ttfb"]), 2)
                row[f"ttlb_vs_{base_name}_pct"] = round(_delta_pct(m["ttlb"], base["ttlb"]), 2)
        rows.append(row)

    lines = [
        f"{'cell':<26} {'seeds':>5} {'ttfb_s':>9} {'ttlb_s':>9} "
        f"{'dTTFB/car':>10} {'dTTLB/car':>10} {'dTTFB/van':>10} {'dTTLB/van':>10}"
    ]
    for row in rows:
        label = cell_label(row["strategy"], row["circuits"])
        lines.append(
            f"{label:<26} {row['seeds']:>5} {row['median_ttfb_s']:>9.3f} {row['median_ttlb_s']:>9.3f} "
            f"{_fmt_pct(row.get('ttfb_vs_car_pct')):>10} {_fmt_pct(row.get('ttlb_vs_car_pct')):>10} "
            f"{_fmt_pct(row.get('ttfb_vs_vanilla_pct')):>10} {_fmt_pct(row.get('ttlb_vs_vanilla_pct')):>10}"
        )
    lines.append("")
    lines.append("full-scale reference deltas (median, whole-network campaign):")
    for strategy, n, base, dttfb, dttlb in REFERENCE_FULL_SCALE:
        lines.append(
            f"  {cell_label(strategy, n):<16} vs {base:<8} TTFB {dttfb:+.1f}%  TTLB {dttlb:+.1f}%"
        )
    return rows, "\n".join(lines) + "\n"


def _fmt_pct(value) -> str:
    return "-" if value is None else f"{value:+.1f}%"


def write_comparison(sweep_results: dict, out_dir, kind: str = "web") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, text = comparison_table(sweep_results, kind)
    (out_dir / "comparison.txt").write_text(text)
    if rows:
        fields = sorted({k for row in rows for k in row})
        with open(out_dir / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)


# --- per-run CDF extraction -----------------------------------------------------


def _write_cdf(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "cdf"])
        for v, p in points:
            w.writerow([f"{v:.6f}", f"{p:.6f}"])


def _label_for(run_dir: Path) -> str:
    parts = [p for p in run_dir.parts if p not in (".", "")]
    return "_".join(parts[-2:]) if len(parts) >= 2 else parts[-1]


def circuit_counts_per_client(run_dir, warmup_s: float) -> tuple:
    """(created, used) counts per client from circuits.csv, warm-up excluded."""
    created: dict = {}
    used: dict = {}
    with open(Path(run_dir) / "circuits.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if not r["built_at_s"] or float(r["built_at_s"]) < warmup_s:
                continue
            client = int(r["client_id"])
            created[client] = created.get(client, 0) + 1
            if int(r["streams"]) > 0:
                used[client] = used.get(client, 0) + 1
    return created, used


def report_run(run_dir, out_dir) -> dict:
    """Emit CDF column files for one run; returns its summary line fields."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = _label_for(run_dir)
    warmup = _warmup_s(run_dir)
    streams = [
        s
        for s in load_streams(run_dir)
        if s.requested_at_s >= warmup and s.outcome == "completed" and s.kind == "web"
    ]
    if streams:
        _write_cdf(out_dir / f"{label}_ttfb_cdf.csv", cdf_points([s.ttfb_s for s in streams]))
        _write_cdf(out_dir / f"{label}_ttlb_cdf.csv", cdf_points([s.ttlb_s for s in streams]))
    created, used = circuit_counts_per_client(run_dir, warmup)
    if created:
        _write_cdf(out_dir / f"{label}_created_cdf.csv", cdf_points([float(v) for v in created.values()]))
        _write_cdf(out_dir / f"{label}_used_cdf.csv", cdf_points([float(v) for v in used.values()] or [0.0]))
    summary = load_summary(run_dir)
    web = summary.get("kinds", {}).get("web", {})
    return {
        "label": label,
        "streams": web.get("streams", 0),
        "completed": web.get("completed", 0),
        "failed": web.get("failed", 0),
        "median_ttfb_s": web.get("ttfb", {}).get("median"),
        "median_ttlb_s": web.get("ttlb", {}).get("median"),
    }


def report_adversary_dir(adv_dir) -> Optional[str]:
    """Box-plot five-number summary text for an adversary output directory."""
    adv_dir = Path(adv_dir)
    summary_path = adv_dir / "relay_summary.json"
    if not summary_path.exists():
        return None
    with open(summary_path) as fh:
        summary = json.load(fh)
    rates = [run["client_mean"] for run in summary.get("per_run", [])]
    stats = boxplot_stats(rates)
    return (
        f"{adv_dir.name}: client-mean compromise over {len(rates)} marking runs: "
        f"min {stats['min']:.4f}  q1 {stats['q1']:.4f}  median {stats['median']:.4f}  "
        f"q3 {stats['q3']:.4f}  max {stats['max']:.4f}"
    )


def write_report(run_dirs: Sequence, out_dir) -> list:
    """Summary text + CDF files for a set of completed run directories."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{'run':<40} {'streams':>8} {'done':>7} {'fail':>6} {'ttfb_s':>9} {'ttlb_s':>9}"
    ]
    reported = []
    skipped = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        if not (run_dir / "summary.json").exists():
            adv = report_adversary_dir(run_dir)
            if adv is not None:
                lines.append(adv)
                reported.append(str(run_dir))
            else:
                skipped.append(str(run_dir))
            continue
        fields = report_run(run_dir, out_dir)
        ttfb = fields["median_ttfb_s"]
        ttlb = fields["median_ttlb_s"]
        lines.append(
            f"{fields['label']:<40} {fields['streams']:>8} {fields['completed']:>7} "
            f"{fields['failed']:>6} "
            f"{ttfb if ttfb is None else format(ttfb, '.3f'):>9} "
            f"{ttlb if ttlb is None else format(ttlb, '.3f'):>9}"
        )
        reported.append(str(run_dir))
    if skipped:
        lines.append("")
        lines.append("skipped (incomplete): " + ", ".join(skipped))
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return reported
