"""Deterministic report serialization: JSON, table CSV, simple SVG charts.

Floats are quantized to 9 significant digits before JSON encoding so two
equal report sets always serialize to identical bytes; table CSVs render
rates with 2 decimals ("1.00") to match how such results are usually quoted.
"""

from __future__ import annotations

import json
from pathlib import Path


def _quantize(value):
    if isinstance(value, float):
        return float(f"{value:.9g}")
    if isinstance(value, dict):
        return {k: _quantize(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [_quantize(v) for v in value]
    return value


def report_to_dict(report) -> dict:
    if hasattr(report, "to_json_dict"):
        return report.to_json_dict()
    if isinstance(report, dict):
        return report
    raise TypeError(f"cannot serialize report of type {type(report)!r}")


def dumps_reports(reports: list) -> str:
    body = {"reports": [_quantize(report_to_dict(r)) for r in reports]}
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def write_report(reports: list, fmt: str, path: str | Path) -> None:
    """Serialize a homogeneous report list to JSON or CSV."""
    kinds = {report_to_dict(r).get("kind") for r in reports}
    if len(kinds) > 1:
        raise ValueError(f"mixed report kinds in one file: {sorted(map(str, kinds))}")
    if fmt == "json":
        Path(path).write_text(dumps_reports(reports), encoding="utf-8")
    elif fmt == "csv":
        rows = [report_to_dict(r) for r in reports]
        if not rows:
            Path(path).write_text("", encoding="utf-8")
            return
        keys = sorted(rows[0].keys())
        lines = [",".join(keys)]
        for row in rows:
            lines.append(",".join(_csv_cell(row.get(k)) for k in keys))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format: {fmt!r}")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    if isinstance(value, (dict, list)):
        return '"' + json.dumps(_quantize(value), sort_keys=True).replace('"', '""') + '"'
    text = str(value)
    if "," in text or '"' in text:
        return '"' + text.replace('"', '""') + '"'
    return text


def write_rate_table_csv(
    path: str | Path,
    column_header: str,
    columns: list[str],
    rows: list[tuple[str, str, list[float]]],
) -> None:
    """Paper-table-shaped CSV: one row per (method, prompt), 2-decimal rates."""
    lines = ["method,prompt," + ",".join(columns)]
    for method, prompt, values in rows:
        cells = ",".join(f"{v:.2f}" for v in values)
        lines.append(f"{method},{_csv_cell(prompt)},{cells}")
    header_note = f"# columns: {column_header}\n"
    Path(path).write_text(header_note + "\n".join(lines) + "\n", encoding="utf-8")


def write_bar_chart_svg(
    path: str | Path,
    title: str,
    labels: list[str],
    series: dict[str, list[float]],
) -> None:
    """Grouped bar chart of rates in [0, 1]; no plotting dependency."""
    width, height = 640, 360
    margin_left, margin_bottom, margin_top = 50, 60, 40
    plot_w = width - margin_left - 20
    plot_h = height - margin_top - margin_bottom
    group_w = plot_w / max(len(labels), 1)
    n_series = max(len(series), 1)
    bar_w = group_w * 0.8 / n_series
    palette = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width/2:.0f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin_top + plot_h * (1 - frac)
        parts.append(
            f'<line x1="{margin_left}" y1="{y:.1f}" x2="{width-20}" y2="{y:.1f}" '
            'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{margin_left-6}" y="{y+4:.1f}" text-anchor="end" font-size="11">{frac:.2f}</text>'
        )
    for si, (name, values) in enumerate(sorted(series.items())):
        color = palette[si % len(palette)]
        for li, value in enumerate(values):
            x = margin_left + li * group_w + group_w * 0.1 + si * bar_w
            h = plot_h * max(0.0, min(1.0, value))
            y = margin_top + plot_h - h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" '
                f'fill="{color}"/>'
            )
        legend_y = 36 + si * 16
        parts.append(f'<rect x="{width-150}" y="{legend_y}" width="12" height="12" fill="{color}"/>')
        parts.append(
            f'<text x="{width-133}" y="{legend_y+11}" font-size="12">{name}</text>'
        )
    for li, label in enumerate(labels):
        x = margin_left + (li + 0.5) * group_w
        parts.append(
            f'<text x="{x:.1f}" y="{height-margin_bottom+18}" text-anchor="middle" '
            f'font-size="12">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
