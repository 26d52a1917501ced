"""Cell-level detection metrics."""
from __future__ import annotations

import numpy as np

from .core import DataError, ShapeError


def cell_ap(scores, truths) -> float:
    """Average precision over every cell of every frame.

    Cells are ranked by score; tied scores form a single threshold. AP is the
    trapezoidal area under the precision-recall curve, anchored at recall 0
    with the precision of the first threshold.
    """
    if isinstance(scores, np.ndarray) and isinstance(truths, np.ndarray):
        s_list, t_list = [scores], [truths]
    else:
        s_list, t_list = list(scores), list(truths)
    if len(s_list) != len(t_list):
        raise ShapeError("scores and truths must have the same number of frames")
    for s, t in zip(s_list, t_list):
        if np.shape(s) != np.shape(t):
            raise ShapeError(f"score/truth shape mismatch: {np.shape(s)} vs {np.shape(t)}")
    s = np.concatenate([np.ravel(x) for x in s_list]).astype(np.float64)
    y = np.concatenate([np.ravel(x) for x in t_list]).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("average precision is undefined without positive cells")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[ends], fp[ends]
    recall = np.r_[0.0, tp / n_pos]
    precision = tp / (tp + fp)
    precision = np.r_[precision[0], precision]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
