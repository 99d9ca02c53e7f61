"""Brute-force scorer over 0/1 indicator matrices, written without the
package's set-based code so the two can be compared."""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def indicator(sets, k):
    m = np.zeros((len(sets), k), dtype=int)
    for i, s in enumerate(sets):
        for j in s:
            m[i, j] = 1
    return m


def brute_scores(pred_sets, gold_sets, k, columns=None):
    """Exact (Fraction) macro and micro P/R/F1 restricted to ``columns``."""
    cols = list(range(k)) if columns is None else list(columns)
    P = indicator(pred_sets, k)[:, cols]
    G = indicator(gold_sets, k)[:, cols]
    precisions, recalls = [], []
    tp = fp = fn = 0
    for p_row, g_row in zip(P, G):
        if g_row.sum() == 0:
            continue
        inter = int((p_row * g_row).sum())
        recalls.append(Fraction(inter, int(g_row.sum())))
        if p_row.sum():
            precisions.append(Fraction(inter, int(p_row.sum())))
        tp += inter
        fp += int(p_row.sum()) - inter
        fn += int(g_row.sum()) - inter

    def mean(xs):
        return sum(xs, Fraction(0)) / len(xs) if xs else Fraction(0)

    def f1(p, r):
        return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)

    mp, mr = mean(precisions), mean(recalls)
    up = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    ur = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    return {"macro": (mp, mr, f1(mp, mr)), "micro": (up, ur, f1(up, ur))}
