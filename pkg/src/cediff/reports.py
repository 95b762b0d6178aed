"""CSV tables (canonical results) and minimal SVG renderings derived from them.

Every CSV starts with a ``# config_digest=<hex>`` comment line. SVGs are a
pure function of the CSV contents, so re-rendering is byte-identical.
"""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import FormatError, MissingArtifactError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 480, 320
MARGIN = (56, 20, 36, 48)  # left, right, top, bottom


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, digest: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    """Returns (digest, header, rows) with rows as lists of strings."""
    text = Path(path).read_text(encoding="utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("# config_digest="):
        raise FormatError(f"{path}: missing config digest line", offset=0)
    rows = list(csv.reader(io.StringIO(rest)))
    if not rows:
        raise FormatError(f"{path}: missing header", offset=len(first) + 1)
    return first.split("=", 1)[1], rows[0], rows[1:]


def read_table(path):
    """Returns (digest, {column: list of str})."""
    digest, header, rows = read_csv(path)
    return digest, {h: [r[i] for r in rows] for i, h in enumerate(header)}


def _num(s: str) -> float:
    return float(s) if s not in ("", "nan") else math.nan


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim, digest, xticks=True):
        self.parts = []
        self.xlim = xlim
        self.ylim = ylim
        l, r, t, b = MARGIN
        self.box = (l, t, WIDTH - r, HEIGHT - b)
        self.parts.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                          f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">')
        self.parts.append(f"<!-- config_digest={digest} -->")
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        x0, y0, x1, y1 = self.box
        self.parts.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="black"/>')
        self.text(WIDTH / 2, 20, title, anchor="middle", size=13)
        self.text((x0 + x1) / 2, HEIGHT - 10, xlabel, anchor="middle")
        self.parts.append(f'<text x="14" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
                          f'transform="rotate(-90 14 {(y0 + y1) / 2:.2f})">{escape(ylabel)}</text>')
        for i in range(5):
            fx = xlim[0] + (xlim[1] - xlim[0]) * i / 4
            fy = ylim[0] + (ylim[1] - ylim[0]) * i / 4
            if xticks:
                self.text(self.px(fx), y1 + 14, f"{fx:.3g}", anchor="middle")
            self.text(x0 - 4, self.py(fy) + 4, f"{fy:.3g}", anchor="end")

    def px(self, v):
        x0, _, x1, _ = self.box
        lo, hi = self.xlim
        return x0 + (v - lo) / (hi - lo) * (x1 - x0)

    def py(self, v):
        _, y0, _, y1 = self.box
        lo, hi = self.ylim
        return y1 - (v - lo) / (hi - lo) * (y1 - y0)

    def text(self, x, y, s, anchor="start", size=None):
        sz = f' font-size="{size}"' if size else ""
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{anchor}"{sz}>{escape(str(s))}</text>')

    def legend(self, labels):
        x1, y0 = self.box[2], self.box[1]
        for i, lab in enumerate(labels):
            y = y0 + 12 + 14 * i
            self.parts.append(f'<rect x="{x1 - 110}" y="{y - 8:.2f}" width="9" height="9" fill="{PALETTE[i % len(PALETTE)]}"/>')
            self.text(x1 - 97, y, lab)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _limits(vals, pad=0.05, floor=None):
    vals = [v for v in vals if not math.isnan(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if floor is not None:
        lo = min(lo, floor)
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return (lo if floor is not None and lo == floor else lo - pad * span, hi + pad * span)


def scatter_svg(xs, ys, title, xlabel, ylabel, digest) -> str:
    c = _Canvas(title, xlabel, ylabel, _limits(xs), _limits(ys), digest)
    for x, y in zip(xs, ys):
        if not (math.isnan(x) or math.isnan(y)):
            c.parts.append(f'<circle cx="{c.px(x):.2f}" cy="{c.py(y):.2f}" r="2" fill="{PALETTE[0]}" fill-opacity="0.6"/>')
    return c.render()


def bar_svg(groups, series, values, title, ylabel, digest) -> str:
    """Grouped bars: ``values[s][g]`` for series s and group g."""
    flat = [v for row in values for v in row]
    c = _Canvas(title, "", ylabel, (0.0, float(len(groups))), _limits(flat, floor=0.0), digest, xticks=False)
    width = 0.8 / max(1, len(series))
    for g, name in enumerate(groups):
        c.text(c.px(g + 0.5), c.box[3] + 14, name, anchor="middle")
        for s in range(len(series)):
            v = values[s][g]
            if math.isnan(v):
                continue
            x = c.px(g + 0.1 + s * width)
            top, base = c.py(v), c.py(c.ylim[0])
            c.parts.append(f'<rect x="{x:.2f}" y="{top:.2f}" width="{c.px(width) - c.px(0):.2f}" '
                           f'height="{base - top:.2f}" fill="{PALETTE[s % len(PALETTE)]}"/>')
    c.legend(series)
    return c.render()


def hist_svg(edges, counts_by_series, title, xlabel, digest) -> str:
    """Overlaid step histograms sharing bin edges."""
    peak = [float(v) for counts in counts_by_series.values() for v in counts]
    c = _Canvas(title, xlabel, "count", (edges[0], edges[-1]), _limits(peak, floor=0.0), digest)
    for s, (name, counts) in enumerate(counts_by_series.items()):
        pts = [(c.px(edges[0]), c.py(0.0))]
        for i, n in enumerate(counts):
            pts += [(c.px(edges[i]), c.py(n)), (c.px(edges[i + 1]), c.py(n))]
        pts.append((c.px(edges[-1]), c.py(0.0)))
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        c.parts.append(f'<polyline points="{path}" fill="none" stroke="{PALETTE[s % len(PALETTE)]}" stroke-width="1.5"/>')
    c.legend(list(counts_by_series))
    return c.render()


def _hist_groups(table, key_cols):
    """Group histogram rows by key columns: {key: (edges, counts)}."""
    groups = {}
    for i in range(len(table["count"])):
        key = tuple(table[k][i] for k in key_cols)
        edges, counts = groups.setdefault(key, ([], []))
        if not edges:
            edges.append(float(table["bin_lo"][i]))
        edges.append(float(table["bin_hi"][i]))
        counts.append(int(table["count"][i]))
    return groups


def _render_fig2(src, dst):
    digest, t = read_table(src)
    out = []
    groups = _hist_groups(t, ("metric", "variant"))
    for metric in sorted({k[0] for k in groups}):
        series = {k[1]: groups[k][1] for k in sorted(groups) if k[0] == metric}
        edges = next(groups[k][0] for k in sorted(groups) if k[0] == metric)
        name = dst / f"fig2_{metric}.svg"
        name.write_text(hist_svg(edges, series, f"different-class CE {metric}", metric, digest), encoding="utf-8")
        out.append(name)
    return out


def _render_fig3(src, dst):
    digest, t = read_table(src)
    out = []
    for eps in sorted(set(t["epsilon"]), key=float):
        rows = [i for i, e in enumerate(t["epsilon"]) if e == eps]
        xs = [_num(t["avg_distance"][i]) for i in rows]
        ys = [_num(t["confidence"][i]) for i in rows]
        name = dst / f"fig3_eps{eps}.svg"
        name.write_text(scatter_svg(xs, ys, f"epsilon={eps}", "average CE distance", "true-class confidence",
                                    digest), encoding="utf-8")
        out.append(name)
    return out


def _render_bars(src, dst, fname, cols, title, ylabel):
    digest, t = read_table(src)
    groups = [f"eps={e}" for e in t["epsilon"]]
    values = [[_num(v) for v in t[c]] for c in cols]
    path = dst / fname
    path.write_text(bar_svg(groups, list(cols), values, title, ylabel, digest), encoding="utf-8")
    return [path]


def _render_fig5(src, dst):
    digest, t = read_table(src)
    groups = _hist_groups(t, ("series",))
    edges = next(iter(groups.values()))[0]
    path = dst / "fig5_ce_from_ce.svg"
    path.write_text(hist_svg(edges, {k[0]: v[1] for k, v in sorted(groups.items())},
                             "different-class CE L2 by source", "l2", digest), encoding="utf-8")
    return [path]


FIGURES = {
    "fig2_hist.csv": _render_fig2,
    "fig3_scatter.csv": _render_fig3,
    "fig4_accuracy.csv": lambda s, d: _render_bars(
        s, d, "fig4_accuracy.svg", ("clean_acc", "same_class_acc", "diff_class_acc", "source_prediction_prob"),
        "classifier performance on CE data", "fraction"),
    "robustness.csv": lambda s, d: _render_bars(
        s, d, "robustness.svg", ("clean_train_acc", "clean_test_acc", "pgd_test_acc"),
        "accuracy under attack at own budget", "accuracy"),
    "fig5_hist.csv": _render_fig5,
}


def emit_reports(art_dir, required=None):
    """Render SVGs from the evaluation CSVs in ``art_dir/eval`` into ``art_dir/reports``.

    ``required`` names CSVs that must exist; absent ones are listed in the
    raised error. Returns the written SVG paths.
    """
    art_dir = Path(art_dir)
    src_dir = art_dir / "eval"
    dst = art_dir / "reports"
    required = list(FIGURES) if required is None else list(required)
    missing = [str(src_dir / n) for n in required if not (src_dir / n).is_file()]
    if missing:
        raise MissingArtifactError("cannot emit reports", missing)
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    for name, render in FIGURES.items():
        if (src_dir / name).is_file():
            written += render(src_dir / name, dst)
    return written
