import warnings
from fractions import Fraction

import numpy as np


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k of positives.

    Ranking is by descending score; ties keep input order (stable sort).
    The sum is accumulated as an exact fraction and rounded once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / n_pos)


def mean_average_precision(score_matrix, labels, num_classes: int | None = None) -> float:
    """mAP over classes; ``score_matrix`` is ``[videos, classes]``.

    Classes without a positive video are skipped with a warning.
    """
    S = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    C = S.shape[1] if num_classes is None else num_classes
    aps, skipped = [], []
    for c in range(C):
        pos = y == c
        if not pos.any():
            skipped.append(c)
            continue
        aps.append(average_precision(S[:, c], pos))
    if skipped:
        warnings.warn(f"classes {skipped} have no positive examples; excluded from mAP", stacklevel=2)
    if not aps:
        raise ValueError("no class has a positive example")
    return float(np.mean(aps))


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
