"""Report emission: CSV tables, Markdown summaries, SVG sweep charts.

Decimal renderings use Python's round-half-even float formatting.  CSV uses
17 significant digits so a re-parse recovers the in-memory values.
"""

from __future__ import annotations

import os
from pathlib import Path
from xml.sax.saxutils import escape

from .evaluation import EvalReport
from .sweep import SweepResult

FORMATS = ("csv", "md", "svg")


def format_pm(mean: float, std: float, scale: float = 1.0, digits: int = 2) -> str:
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


def write_csv(report: EvalReport, path: str | os.PathLike) -> None:
    lines = ["env_id,rmse,success_raw,success_norm"]
    for env_id, rmse, raw, norm in zip(
        report.env_ids, report.rmse_per_env, report.success_raw_per_env,
        report.success_norm_per_env,
    ):
        lines.append(f"{env_id},{rmse:.17g},{raw:.17g},{norm:.17g}")
    lines.append(
        f"summary,{report.rmse_mean:.17g},{report.success_raw_mean:.17g},"
        f"{report.success_norm_mean:.17g}"
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_markdown(reports: dict[str, EvalReport], path: str | os.PathLike) -> None:
    """Two-panel summary: offline RMSE (x 10^-2) and normalized success."""
    if not reports:
        raise ValueError("no reports to render")
    lines = [
        "# Evaluation summary",
        "",
        "## Offline Evaluation: RMSE × 10⁻² (↓)",
        "",
        "| Method | RMSE |",
        "| --- | --- |",
    ]
    for label, rep in reports.items():
        lines.append(f"| {label} | {format_pm(rep.rmse_mean, rep.rmse_std, scale=100.0)} |")
    lines += [
        "",
        "## Online Evaluation: Normalized Success Rate (↑)",
        "",
        "| Method | Success |",
        "| --- | --- |",
    ]
    for label, rep in reports.items():
        lines.append(
            f"| {label} | {format_pm(rep.success_norm_mean, rep.success_norm_std)} |"
        )
    lines += [
        "",
        f"Averaged across {next(iter(reports.values())).n_envs} environments and "
        f"{next(iter(reports.values())).episodes} episodes each; "
        "± is the population std across environments.",
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


_SVG_W, _SVG_H = 640, 420
_MARGIN = 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _x_pos(i: int, n: int) -> float:
    if n == 1:
        return _MARGIN + (_SVG_W - 2 * _MARGIN) / 2
    return _MARGIN + (_SVG_W - 2 * _MARGIN) * i / (n - 1)


def _y_pos(v: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return _SVG_H - _MARGIN
    frac = (v - lo) / (hi - lo)
    return _SVG_H - _MARGIN - (_SVG_H - 2 * _MARGIN) * frac


def write_svg(sweeps: list[SweepResult], path: str | os.PathLike) -> None:
    """Line chart of mean normalized success vs knob value, std whiskers."""
    if not sweeps:
        raise ValueError("no sweeps to render")
    lo, hi = 0.0, 1.0
    for sw in sweeps:
        for rep in sw.reports:
            hi = max(hi, rep.success_norm_mean + rep.success_norm_std)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_SVG_W / 2:.1f}" y="{_SVG_H - 15}" text-anchor="middle" '
        f'font-size="14">{escape(" / ".join(sw.knob for sw in sweeps))}</text>',
        f'<text x="18" y="{_SVG_H / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {_SVG_H / 2:.1f})">normalized success</text>',
    ]
    for si, sw in enumerate(sweeps):
        color = _COLORS[si % len(_COLORS)]
        n = len(sw.values)
        pts = []
        for i, rep in enumerate(sw.reports):
            x = _x_pos(i, n)
            y = _y_pos(rep.success_norm_mean, lo, hi)
            y_hi = _y_pos(rep.success_norm_mean + rep.success_norm_std, lo, hi)
            y_lo = _y_pos(rep.success_norm_mean - rep.success_norm_std, lo, hi)
            pts.append(f"{x:.1f},{y:.1f}")
            parts.append(
                f'<line x1="{x:.1f}" y1="{y_lo:.1f}" x2="{x:.1f}" y2="{y_hi:.1f}" '
                f'stroke="{color}" stroke-width="1"/>'
            )
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
            parts.append(
                f'<text x="{x:.1f}" y="{_SVG_H - _MARGIN + 18}" text-anchor="middle" '
                f'font-size="12">{sw.values[i]}</text>'
            )
        parts.append(
            f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_SVG_W - _MARGIN:.1f}" y="{_MARGIN + 16 * si}" '
            f'text-anchor="end" font-size="12" fill="{color}">{escape(sw.knob)}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def emit_report(reports, fmt: str, path: str | os.PathLike):
    """Dispatch on format: csv and md take EvalReports, svg takes sweeps."""
    if fmt == "csv":
        if isinstance(reports, EvalReport):
            write_csv(reports, path)
        else:
            raise TypeError("csv output renders a single EvalReport")
    elif fmt == "md":
        if isinstance(reports, EvalReport):
            reports = {"run": reports}
        write_markdown(reports, path)
    elif fmt == "svg":
        if isinstance(reports, SweepResult):
            reports = [reports]
        write_svg(list(reports), path)
    else:
        raise ValueError(f"unknown report format {fmt!r}, expected one of {FORMATS}")
    return Path(path)
