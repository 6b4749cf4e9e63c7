"""Attention-vs-relatedness analysis and report emission.

The fused model leaves per-layer attention traces behind; averaging them over
tokens, layers and examples gives one weight per source language. If source
attention tracks language similarity, those means should correlate with the
relatedness rows, which is what the correlation report measures.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .data import DataError
from .fusion import zgul_forward
from .metrics import pearson

# trace column keys: "F" is token fusion attention, "L" typology attention
NETWORKS = ("F", "L")


def aggregate_attention(traces, network):
    """Mean per-source weight over every (example, layer, token) row."""
    if network not in NETWORKS:
        raise ValueError(f"network must be one of {NETWORKS}")
    rows = []
    sources = None
    for trace in traces:
        if sources is None:
            sources = trace.sources
        elif trace.sources != sources:
            raise ValueError("traces disagree on the source language list")
        for entry in trace.entries:
            rows.append(entry.alpha_f if network == "F" else entry.alpha_l)
    if not rows:
        raise ValueError("no attention traces to aggregate")
    return np.concatenate(rows, axis=0).mean(axis=0)


def collect_traces(model, examples, profiles=None, limit=None):
    """Plain fused forwards over encoded examples, keeping the traces."""
    if model.kind != "zgul":
        raise DataError("attention analysis needs a fused multi-source model")
    lookup = dict(model.profiles)
    if profiles:
        lookup.update(profiles)
    traces = []
    for k, ex in enumerate(examples):
        if limit is not None and k >= limit:
            break
        profile = lookup.get(ex.language)
        if profile is None:
            raise DataError(f"no typology profile for language {ex.language!r}")
        _, trace = zgul_forward(ex.ids, profile, model, trace=True, sentence_id=k)
        traces.append(trace)
    return traces


@dataclass
class CorrelationRow:
    target: str
    network: str
    r: float


def attention_correlations(mean_weights, relatedness, sources):
    """Pearson r between aggregated weights and relatedness rows.

    mean_weights maps target code -> {network -> per-source weight vector}.
    """
    rows = []
    for target in sorted(mean_weights):
        row = relatedness.row(target, sources)
        for network in NETWORKS:
            weights = mean_weights[target][network]
            rows.append(CorrelationRow(target, network, float(pearson(weights, row))))
    return rows


def correlation_report(model, test_sets, relatedness, out_dir=None, profiles=None, limit=None):
    """Aggregate attention per target and correlate with relatedness.

    Returns (rows, mean_weights); with out_dir set also writes correlation.csv,
    attention_means.csv and one heatmap SVG per network plus the relatedness
    reference heatmap.
    """
    if not test_sets:
        raise DataError("no test sets to analyze")
    sources = model.languages
    mean_weights = {}
    for target in sorted(test_sets):
        traces = collect_traces(model, test_sets[target], profiles=profiles, limit=limit)
        mean_weights[target] = {n: aggregate_attention(traces, n) for n in NETWORKS}
    rows = attention_correlations(mean_weights, relatedness, sources)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_correlation_csv(os.path.join(out_dir, "correlation.csv"), rows)
        write_attention_csv(os.path.join(out_dir, "attention_means.csv"), mean_weights, sources)
        targets = sorted(mean_weights)
        for network in NETWORKS:
            grid = np.stack([mean_weights[t][network] for t in targets])
            write_heatmap_svg(
                os.path.join(out_dir, f"heatmap_{network}.svg"),
                targets, sources, grid,
                title=f"mean {network} attention over sources",
            )
        ref = np.stack([relatedness.row(t, sources) for t in targets])
        write_heatmap_svg(
            os.path.join(out_dir, "heatmap_relatedness.svg"),
            targets, sources, ref, title="planted relatedness",
        )
    return rows, mean_weights


# -- emission ------------------------------------------------------------


def write_correlation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "network", "pearson_r"])
        for row in rows:
            w.writerow([row.target, row.network, f"{row.r:.6f}"])


def write_attention_csv(path, mean_weights, sources):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "network", "source", "mean_weight"])
        for target in sorted(mean_weights):
            for network in NETWORKS:
                for j, src in enumerate(sources):
                    w.writerow([target, network, src, f"{mean_weights[target][network][j]:.6f}"])


def write_classwise_csv(path, table):
    """Per-class score table; classes sorted, micro row last."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "support"])
        names = sorted(c for c in table if c != "micro") + ["micro"]
        for name in names:
            s = table[name]
            w.writerow([name, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}", s.support])


def _cell_color(t):
    # white to dark blue; t in [0, 1]
    r = int(round(255 + t * (23 - 255)))
    g = int(round(255 + t * (74 - 255)))
    b = int(round(255 + t * (134 - 255)))
    return f"rgb({r},{g},{b})"


def write_heatmap_svg(path, row_labels, col_labels, values, title=""):
    """Single self-contained SVG file, no plotting dependency."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(row_labels), len(col_labels)):
        raise ValueError("heatmap value shape does not match labels")
    cell, left, top = 46, 96, 54
    width = left + cell * len(col_labels) + 20
    height = top + cell * len(row_labels) + 24
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="{left}" y="18">{title}</text>' if title else "",
    ]
    for j, col in enumerate(col_labels):
        x = left + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 8}" text-anchor="middle">{col}</text>')
    for i, row in enumerate(row_labels):
        y = top + i * cell + cell // 2
        parts.append(f'<text x="{left - 8}" y="{y + 4}" text-anchor="end">{row}</text>')
        for j in range(len(col_labels)):
            t = (values[i, j] - lo) / span
            x = left + j * cell
            top_y = top + i * cell
            parts.append(
                f'<rect x="{x}" y="{top_y}" width="{cell}" height="{cell}" '
                f'fill="{_cell_color(t)}" stroke="#888"/>'
            )
            ink = "#000" if t < 0.6 else "#fff"
            parts.append(
                f'<text x="{x + cell // 2}" y="{top_y + cell // 2 + 4}" '
                f'text-anchor="middle" fill="{ink}">{values[i, j]:.2f}</text>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(p for p in parts if p))
