"""CSV / JSON / SVG emission for report bundles. Output is byte-deterministic."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .suites import Plot, ReportBundle, Table, _plain

RECORD_COLUMNS = ["m_cl_nc", "m_cl_c", "m_adv_nc", "m_adv_c", "upr", "cae", "csg"]
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def records_csv(bundle: ReportBundle) -> str:
    prov = sorted({k for r in bundle.records for k in r.provenance})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS + prov)
    for r in bundle.records:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in RECORD_COLUMNS] + [_fmt(r.provenance.get(k, "")) for k in prov])
    return buf.getvalue()


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def bundle_json(bundle: ReportBundle) -> str:
    doc = {
        "kind": bundle.kind, "spec": bundle.spec, "digest": bundle.digest,
        "records": [r.row() for r in bundle.records],
        "tables": {k: {"columns": t.columns, "rows": t.rows} for k, t in bundle.tables.items()},
        "plots": {k: {"title": p.title, "x_label": p.x_label, "y_label": p.y_label, "x": p.x,
                      "series": p.series, "style": p.style} for k, p in bundle.plots.items()},
        "checks": bundle.checks,
    }
    return json.dumps(_finite(_plain(doc)), indent=2, sort_keys=True) + "\n"


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


# --------------------------------------------------------------------- SVG

W, H, PAD = 480, 320, 48


def svg_plot(plot: Plot) -> str:
    ys = [v for s in plot.series.values() for v in s if v is not None and math.isfinite(v)]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    lo = min(lo, 0.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max(len(plot.x), 1)

    def sx(i):
        return PAD + (W - 2 * PAD) * ((i + 0.5) / n)

    def sy(v):
        return H - PAD - (H - 2 * PAD) * (v - lo) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(plot.title)}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="11">{escape(plot.x_label)}</text>',
           f'<text x="12" y="{H / 2:.1f}" font-size="11" transform="rotate(-90 12 {H / 2:.1f})" '
           f'text-anchor="middle">{escape(plot.y_label)}</text>']
    for v in (lo, (lo + hi) / 2, hi):
        out.append(f'<text x="{PAD - 4}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="9">{v:.3g}</text>')
    for i, x in enumerate(plot.x):
        out.append(f'<text x="{sx(i):.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="9">'
                   f'{escape(_fmt(x) if not isinstance(x, str) else x)}</text>')
    k = max(len(plot.series), 1)
    slot = (W - 2 * PAD) / n
    for j, (name, vals) in enumerate(plot.series.items()):
        color = PALETTE[j % len(PALETTE)]
        if plot.style == "bar":
            bw = slot * 0.8 / k
            for i, v in enumerate(vals):
                x0 = PAD + slot * i + slot * 0.1 + bw * j
                y0, y1 = sy(max(v, 0.0)), sy(min(v, 0.0))
                out.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{bw:.1f}" height="{y1 - y0:.1f}" fill="{color}"/>')
        else:
            pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(vals))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - PAD + 2}" y="{PAD + 14 * j}" font-size="9" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(bundle: ReportBundle, out_dir, formats=("csv", "json", "svg")) -> list[Path]:
    """Write the bundle under ``out_dir``; returns the written paths in order."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    files: dict[str, str] = {}
    if "csv" in formats:
        files[f"{bundle.kind}_records.csv"] = records_csv(bundle)
        for name, t in bundle.tables.items():
            files[f"{bundle.kind}_{name}.csv"] = table_csv(t)
    if "json" in formats:
        files[f"{bundle.kind}.json"] = bundle_json(bundle)
    if "svg" in formats:
        for name, p in bundle.plots.items():
            files[f"{bundle.kind}_{name}.svg"] = svg_plot(p)
    written = []
    for name, text in files.items():
        path = out / name
        try:
            path.write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
