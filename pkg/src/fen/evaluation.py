"""ICDAR-2013 / DetEval style text localisation evaluation.

Both protocols share one matching engine built on the area-recall matrix
(intersection / ground-truth area) and area-precision matrix
(intersection / detection area). One-to-one, one-to-many (split) and
many-to-one (merge) matches are found in that order; the protocols differ
only in the credit given to split and merge matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DONT_CARE = "###"


@dataclass(frozen=True)
class MatchParams:
    area_recall: float = 0.8
    area_precision: float = 0.4
    center_diff: float = 1.0
    split_recall: float = 0.8
    split_precision: float = 1.0
    merge_recall: float = 1.0
    merge_precision: float = 0.8

    def __post_init__(self):
        for v in (self.area_recall, self.area_precision):
            if not 0.0 < v <= 1.0:
                raise ValueError("area thresholds must be in (0, 1]")


def deteval_params(tr: float = 0.8, tp: float = 0.4, penalty: float = 0.8) -> MatchParams:
    return MatchParams(area_recall=tr, area_precision=tp, split_recall=penalty,
                       merge_precision=penalty)


def ic13_params() -> MatchParams:
    # merged detections are credited in full
    return MatchParams(merge_precision=1.0)


PROTOCOLS = {"deteval": deteval_params, "ic13": ic13_params}


@dataclass
class ImageAnnotations:
    """Corner boxes ``(N, 4)``; ``care`` flags are only meaningful for ground truth."""

    boxes: np.ndarray
    care: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
            raise ValueError("invalid corners: need x2 > x1 and y2 > y1")
        if self.care is None:
            self.care = np.ones(len(self.boxes), dtype=bool)
        self.care = np.asarray(self.care, dtype=bool)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class ImageResult:
    recall_credit: float
    precision_credit: float
    n_gt: int
    n_det: int

    @property
    def recall(self) -> float:
        return self.recall_credit / self.n_gt if self.n_gt else 0.0

    @property
    def precision(self) -> float:
        return self.precision_credit / self.n_det if self.n_det else 0.0


@dataclass
class MetricsReport:
    recall: float
    precision: float
    fmeasure: float
    protocol: str
    per_image: dict[str, ImageResult] = field(default_factory=dict)

    def csv_line(self) -> str:
        return f"{self.protocol},{self.recall:.4f},{self.precision:.4f},{self.fmeasure:.4f}"


def fmeasure(r: float, p: float) -> float:
    return 0.0 if r + p == 0 else 2.0 * p * r / (p + r)


def _areas(c: np.ndarray) -> np.ndarray:
    return (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])


def _intersections(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(iw, 0, None) * np.clip(ih, 0, None)


def _canonical(boxes: np.ndarray) -> np.ndarray:
    return boxes[np.lexsort(boxes.T[::-1])]


def match_matrices(gt: np.ndarray, det: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-recall ``sigma`` and area-precision ``tau``, both ``(G, D)``."""
    inter = _intersections(gt, det)
    return inter / _areas(gt)[:, None], inter / _areas(det)[None, :]


def evaluate_image(gt: ImageAnnotations, det: ImageAnnotations, params: MatchParams) -> ImageResult:
    tr, tp = params.area_recall, params.area_precision
    g_care = gt.care.copy()
    det_care = np.ones(len(det), dtype=bool)
    if len(det) and (~g_care).any():
        _, tau_dc = match_matrices(gt.boxes[~g_care], det.boxes)
        det_care = ~np.any(tau_dc > tp, axis=0)
    n_gt, n_det = int(g_care.sum()), int(det_care.sum())
    if n_gt == 0 or n_det == 0:
        return ImageResult(0.0, 0.0, n_gt, n_det)

    # canonical order so that results do not depend on input order
    gb = _canonical(gt.boxes[g_care])
    db = _canonical(det.boxes[det_care])
    sigma, tau = match_matrices(gb, db)
    ok = (sigma >= tr) & (tau >= tp)
    gt_done = np.zeros(len(gb), dtype=bool)
    det_done = np.zeros(len(db), dtype=bool)
    recall = precision = 0.0

    g_centers = np.stack([(gb[:, 0] + gb[:, 2]) / 2, (gb[:, 1] + gb[:, 3]) / 2], axis=1)
    d_centers = np.stack([(db[:, 0] + db[:, 2]) / 2, (db[:, 1] + db[:, 3]) / 2], axis=1)
    g_diag = np.hypot(gb[:, 2] - gb[:, 0], gb[:, 3] - gb[:, 1])
    d_diag = np.hypot(db[:, 2] - db[:, 0], db[:, 3] - db[:, 1])

    # one-to-one
    row_count = ok.sum(axis=1)
    col_count = ok.sum(axis=0)
    for g in range(len(gb)):
        for d in range(len(db)):
            if gt_done[g] or det_done[d] or not ok[g, d]:
                continue
            if row_count[g] != 1 or col_count[d] != 1:
                continue
            dist = math.dist(g_centers[g], d_centers[d])
            if dist / ((g_diag[g] + d_diag[d]) / 2.0) > params.center_diff:
                continue
            gt_done[g] = det_done[d] = True
            recall += 1.0
            precision += 1.0

    # one ground truth split over several detections
    for g in range(len(gb)):
        if gt_done[g]:
            continue
        cand = np.flatnonzero(~det_done & (tau[g] >= tp))
        if len(cand) >= 2 and sigma[g, cand].sum() >= tr:
            gt_done[g] = True
            det_done[cand] = True
            recall += params.split_recall
            precision += params.split_precision * len(cand)

    # one detection merging several ground truths
    for d in range(len(db)):
        if det_done[d]:
            continue
        cand = np.flatnonzero(~gt_done & (sigma[:, d] >= tr))
        if len(cand) >= 2 and tau[cand, d].sum() >= tp:
            det_done[d] = True
            gt_done[cand] = True
            recall += params.merge_recall * len(cand)
            precision += params.merge_precision

    return ImageResult(recall, precision, n_gt, n_det)


def evaluate(gts: Mapping[str, ImageAnnotations], dets: Mapping[str, ImageAnnotations],
             params: MatchParams, protocol: str = "custom") -> MetricsReport:
    """Micro-averaged metrics over a corpus keyed by image name.

    Every detection key must have ground truth; images without detections
    count as empty.
    """
    extra = sorted(set(dets) - set(gts))
    if extra:
        raise KeyError(f"detections for images without ground truth: {extra[:5]}")
    per_image = {}
    rc = pc = 0.0
    n_gt = n_det = 0
    empty = ImageAnnotations(np.zeros((0, 4)))
    for key in sorted(gts):
        res = evaluate_image(gts[key], dets.get(key, empty), params)
        per_image[key] = res
        rc += res.recall_credit
        pc += res.precision_credit
        n_gt += res.n_gt
        n_det += res.n_det
    r = rc / n_gt if n_gt else 0.0
    p = pc / n_det if n_det else 0.0
    return MetricsReport(recall=r, precision=p, fmeasure=fmeasure(r, p), protocol=protocol,
                         per_image=per_image)


def deteval_evaluate(gts, dets, tr: float = 0.8, tp: float = 0.4, penalty: float = 0.8) -> MetricsReport:
    return evaluate(gts, dets, deteval_params(tr, tp, penalty), protocol="deteval")


def ic13_evaluate(gts, dets) -> MetricsReport:
    return evaluate(gts, dets, ic13_params(), protocol="ic13")


def evaluate_protocol(gts, dets, protocol: str) -> MetricsReport:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOLS)}")
    return evaluate(gts, dets, PROTOCOLS[protocol](), protocol=protocol)


# ---------------------------------------------------------------------------
# file formats


def parse_gt_text(text: str) -> ImageAnnotations:
    """Lines ``x1,y1,x2,y2,"transcription"``; ``###`` marks don't-care."""
    boxes, care = [], []
    for raw in text.splitlines():
        line = raw.strip().lstrip("﻿")
        if not line:
            continue
        parts = line.split(",", 4)
        if len(parts) < 4:
            raise ValueError(f"malformed ground-truth line: {raw!r}")
        boxes.append([float(v) for v in parts[:4]])
        trans = parts[4].strip() if len(parts) > 4 else ""
        if len(trans) >= 2 and trans[0] == trans[-1] == '"':
            trans = trans[1:-1]
        care.append(trans != DONT_CARE)
    return ImageAnnotations(np.array(boxes).reshape(-1, 4), np.array(care, dtype=bool))


def parse_det_text(text: str) -> ImageAnnotations:
    """Lines ``x1,y1,x2,y2[,score]``."""
    boxes, scores = [], []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) not in (4, 5):
            raise ValueError(f"malformed detection line: {raw!r}")
        boxes.append([float(v) for v in parts[:4]])
        scores.append(float(parts[4]) if len(parts) == 5 else 1.0)
    return ImageAnnotations(np.array(boxes).reshape(-1, 4), scores=np.array(scores))


def round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def format_detections(corners: np.ndarray, scores: Sequence[float]) -> str:
    """``x1,y1,x2,y2,score`` lines; boxes that collapse after rounding are dropped."""
    lines = []
    for (x1, y1, x2, y2), s in zip(np.asarray(corners).reshape(-1, 4), scores):
        ix1, iy1, ix2, iy2 = (round_half_up(v) for v in (x1, y1, x2, y2))
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        lines.append(f"{ix1},{iy1},{ix2},{iy2},{s:.4f}")
    return "".join(line + "\n" for line in lines)


def load_gt_dir(path: str | Path) -> dict[str, ImageAnnotations]:
    """``gt_<stem>.txt`` files keyed by ``<stem>``."""
    out = {}
    for f in sorted(Path(path).glob("gt_*.txt")):
        out[f.stem[3:]] = parse_gt_text(f.read_text(encoding="utf-8"))
    return out


def load_det_dir(path: str | Path) -> dict[str, ImageAnnotations]:
    """``res_<stem>.txt`` files keyed by ``<stem>``."""
    out = {}
    for f in sorted(Path(path).glob("res_*.txt")):
        out[f.stem[4:]] = parse_det_text(f.read_text(encoding="utf-8"))
    return out
