"""Independent reference implementations used by the tests.

These are written from the definitions, deliberately slow and simple, and
share no code with the package beyond plain data.
"""

from __future__ import annotations

import math

import numpy as np


def corner_iou(a, b) -> float:
    """IoU of two corner-form boxes by explicit area arithmetic."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def reference_nms(corners, scores, threshold):
    """Exhaustive greedy suppression: all pairwise IoUs up front, then one pass."""
    n = len(scores)
    ov = [[corner_iou(corners[i], corners[j]) for j in range(n)] for i in range(n)]
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(ov[i][k] <= threshold for k in kept):
            kept.append(i)
    return kept


def reference_psroi(maps, roi_corners, w_bins, h_bins, stride, n_out):
    """Per-pixel double loop: test every map pixel for membership in every bin."""
    _, height, width = maps.shape
    x1, y1, x2, y2 = (v / stride for v in roi_corners)
    xs, ys = math.floor(x1), math.floor(y1)
    xe, ye = max(math.ceil(x2), xs + 1), max(math.ceil(y2), ys + 1)
    rw, rh = xe - xs, ye - ys
    out = np.zeros((n_out, h_bins, w_bins))
    for c in range(n_out):
        for i in range(h_bins):
            row_lo = ys + math.floor(i * rh / h_bins)
            row_hi = ys + math.ceil((i + 1) * rh / h_bins)
            for j in range(w_bins):
                col_lo = xs + math.floor(j * rw / w_bins)
                col_hi = xs + math.ceil((j + 1) * rw / w_bins)
                ch = c * h_bins * w_bins + i * w_bins + j
                total, count = 0.0, 0
                for y in range(height):
                    for x in range(width):
                        if row_lo <= y < row_hi and col_lo <= x < col_hi:
                            total += maps[ch, y, x]
                            count += 1
                out[c, i, j] = total / count if count else 0.0
    return out


def brute_conv(x, weight, bias, stride, pad):
    """Direct nested-loop convolution with zero padding."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ph, pw = pad
    xp = np.zeros((c_in, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * weight[o]) + bias[o]
    return out


def corners_to_gt_text(boxes, care=None) -> str:
    care = [True] * len(boxes) if care is None else care
    return "".join(f'{x1},{y1},{x2},{y2},"{"word" if c else "###"}"\n'
                   for (x1, y1, x2, y2), c in zip(boxes, care))
