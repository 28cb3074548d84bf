"""Crafted detection corpora reproducing three published metric triples.

Each builder returns ``(gts, dets)`` dictionaries of corner boxes ready for
the evaluation module.
"""

import numpy as np

from fen.evaluation import ImageAnnotations


def _row(n, y=10, w=40, h=16, gap=20):
    return np.array([[10 + k * (w + gap), y, 10 + k * (w + gap) + w, y + h] for k in range(n)], float)


def perfect():
    """Every word found exactly, nothing extra: 100 / 100 / 100."""
    gt = _row(4)
    return {"a": ImageAnnotations(gt)}, {"a": ImageAnnotations(gt.copy())}


def one_false_alarm():
    """Six words all found plus one spurious box: 100 / 85.71 / 92.31."""
    gt = np.vstack([_row(3), _row(3, y=60)])
    det = np.vstack([gt, [[10, 110, 50, 126]]])
    return {"h": ImageAnnotations(gt)}, {"h": ImageAnnotations(det)}


def two_misses_one_false_alarm():
    """Six words, five detections, four correct pairs: 66.67 / 80 / 72.73."""
    gt = np.vstack([_row(3), _row(3, y=60)])
    det = np.vstack([gt[:4], [[10, 110, 50, 126]]])
    return {"i": ImageAnnotations(gt)}, {"i": ImageAnnotations(det)}


CASES = {
    "perfect": (perfect, (1.0, 1.0, 1.0)),
    "false_alarm": (one_false_alarm, (1.0, 0.8571, 0.9231)),
    "misses": (two_misses_one_false_alarm, (0.6667, 0.8, 0.7273)),
}
