"""Tagging metrics: token/span micro-F1, class-wise tables, McNemar, Pearson.

Span scoring strips BIO prefixes and matches (type, start, end) exactly.
Division conventions: any 0-denominator precision/recall/F1 is reported as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def repair_bio(tags, strict=False):
    """Promote 'I-X' that does not continue an 'X' span to 'B-X'.

    Returns (fixed_tags, n_repairs); strict mode reports repairs without
    applying them so callers can reject ill-formed input.
    """
    fixed = []
    n_repairs = 0
    prev_type = None
    for tag in tags:
        if tag == "O":
            fixed.append(tag)
            prev_type = None
        elif tag.startswith("B-"):
            fixed.append(tag)
            prev_type = tag[2:]
        elif tag.startswith("I-"):
            t = tag[2:]
            if prev_type != t:
                n_repairs += 1
                fixed.append(tag if strict else "B-" + t)
            else:
                fixed.append(tag)
            prev_type = t
        else:
            raise ValueError(f"not a BIO tag: {tag!r}")
    return fixed, n_repairs


def extract_spans(tags, repair=True):
    """Decode BIO tags to a list of (type, start, end) with end inclusive."""
    if repair:
        tags, _ = repair_bio(tags)
    spans = []
    start = None
    cur = None
    for i, tag in enumerate(tags):
        if tag.startswith("B-"):
            if cur is not None:
                spans.append((cur, start, i - 1))
            cur = tag[2:]
            start = i
        elif tag.startswith("I-") and cur == tag[2:]:
            continue
        else:
            if cur is not None:
                spans.append((cur, start, i - 1))
            cur = None
            if tag.startswith(("B-", "I-")):  # strict leftover; treat as new span
                cur = tag[2:]
                start = i
    if cur is not None:
        spans.append((cur, start, len(tags) - 1))
    return spans


def encode_spans(spans, length):
    """Inverse of extract_spans for well-formed span sets."""
    tags = ["O"] * length
    for typ, start, end in spans:
        tags[start] = "B-" + typ
        for i in range(start + 1, end + 1):
            tags[i] = "I-" + typ
    return tags


@dataclass
class F1Score:
    precision: float
    recall: float
    f1: float
    support: int


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _check_aligned(preds, golds):
    if len(preds) != len(golds):
        raise ValueError("predictions and golds have different lengths")
    for p, g in zip(preds, golds):
        if len(p) != len(g):
            raise ValueError("prediction/gold sentence length mismatch")


def micro_f1(preds, golds, scheme="token"):
    """Micro-averaged F1 over sentences of tag lists."""
    _check_aligned(preds, golds)
    if scheme == "token":
        total = 0
        correct = 0
        for p, g in zip(preds, golds):
            total += len(g)
            correct += sum(a == b for a, b in zip(p, g))
        if total == 0:
            raise ValueError("no labeled units")
        acc = correct / total
        return F1Score(acc, acc, acc, total)
    if scheme == "bio_span":
        tp = fp = fn = 0
        support = 0
        for p, g in zip(preds, golds):
            ps = set(extract_spans(p))
            gs = set(extract_spans(g))
            support += len(gs)
            tp += len(ps & gs)
            fp += len(ps - gs)
            fn += len(gs - ps)
        prec, rec, f = _prf(tp, fp, fn)
        return F1Score(prec, rec, f, support)
    raise ValueError(f"unknown scheme {scheme!r}")


def classwise_f1(preds, golds, scheme="token", classes=None):
    """Per-class P/R/F1/support plus a 'micro' row consistent with micro_f1."""
    _check_aligned(preds, golds)
    if scheme == "token":
        pairs = [(a, b) for p, g in zip(preds, golds) for a, b in zip(p, g)]
        units_pred = [a for a, _ in pairs]
        units_gold = [b for _, b in pairs]
    elif scheme == "bio_span":
        units_pred, units_gold = [], []
        for p, g in zip(preds, golds):
            ps, gs = set(extract_spans(p)), set(extract_spans(g))
            for sp in ps & gs:
                units_pred.append(sp[0])
                units_gold.append(sp[0])
            for sp in ps - gs:
                units_pred.append(sp[0])
                units_gold.append(None)
            for sp in gs - ps:
                units_pred.append(None)
                units_gold.append(sp[0])
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    seen = sorted({u for u in units_pred + units_gold if u is not None})
    if classes is not None:
        seen = sorted(set(seen) | set(classes))
    table = {}
    for c in seen:
        tp = sum(1 for a, b in zip(units_pred, units_gold) if a == c and b == c)
        fp = sum(1 for a, b in zip(units_pred, units_gold) if a == c and b != c)
        fn = sum(1 for a, b in zip(units_pred, units_gold) if a != c and b == c)
        p, r, f = _prf(tp, fp, fn)
        table[c] = F1Score(p, r, f, tp + fn)
    table["micro"] = micro_f1(preds, golds, scheme)
    return table


def correctness(preds, golds):
    """Flat token-level correctness vector for significance testing."""
    _check_aligned(preds, golds)
    return np.array([a == b for p, g in zip(preds, golds) for a, b in zip(p, g)], dtype=bool)


def mcnemar(pred_a, pred_b, golds):
    """Continuity-corrected McNemar's test on token-level correctness.

    b counts tokens a got right and b wrong, c the converse; the statistic is
    (|b-c|-1)^2/(b+c) against chi-square with 1 df.
    """
    ca = correctness(pred_a, golds)
    cb = correctness(pred_b, golds)
    b = int(np.sum(ca & ~cb))
    c = int(np.sum(~ca & cb))
    if b + c == 0:
        return {"b": b, "c": c, "statistic": 0.0, "p": 1.0}
    statistic = (abs(b - c) - 1) ** 2 / (b + c)
    # chi-square(1 df) survival function in closed form
    p = math.erfc(math.sqrt(statistic / 2.0))
    return {"b": b, "c": c, "statistic": statistic, "p": p}


def pearson(x, y):
    """Pearson correlation by the direct covariance formula."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("undefined correlation (constant vector)")
    return float(np.sum(xc * yc) / (sx * sy))
