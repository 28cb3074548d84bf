"""Deterministic synthetic "scene text" images with word-box ground truth.

Words are bright vertically striped plates on a dark textured background.
Everything is a pure function of ``(spec.seed, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Box, iou

MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    words: tuple[int, int] = (1, 4)
    word_height: tuple[int, int] = (8, 48)
    aspect: tuple[float, float] = (1.0, 6.0)
    background: tuple[float, float] = (0.05, 0.35)
    foreground: tuple[float, float] = (0.75, 1.0)
    noise: float = 0.04
    max_overlap: float = 0.1
    # minimum free pixels between two words; None leaves only the IoU bound
    gap: float | None = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.words[0] < 1 or self.words[1] < self.words[0]:
            raise ValueError(f"bad word count range {self.words}")
        if self.word_height[0] < 2 or self.word_height[1] > self.height:
            raise ValueError(f"bad word height range {self.word_height}")
        if self.aspect[0] < 1 or self.aspect[1] < self.aspect[0]:
            raise ValueError(f"bad aspect range {self.aspect}")


def _place_word(rng: np.random.Generator, spec: SceneSpec) -> tuple[int, int, int, int]:
    ratio = rng.uniform(*spec.aspect)
    h = int(rng.integers(spec.word_height[0], spec.word_height[1] + 1))
    # shrink the height rather than the width so the sampled aspect survives
    h = max(spec.word_height[0], min(h, int((spec.width - 2) / ratio)))
    w = max(2, min(int(round(h * ratio)), spec.width - 2))
    x1 = int(rng.integers(1, spec.width - w))
    y1 = int(rng.integers(1, spec.height - h))
    return x1, y1, x1 + w, y1 + h


def _separated(a: Box, b: Box, gap: float) -> bool:
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    return ax2 + gap <= bx1 or bx2 + gap <= ax1 or ay2 + gap <= by1 or by2 + gap <= ay1


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[Box]]:
    """Render scene ``index``; returns a ``(1, H, W)`` image in ``[0, 1]`` and its boxes.

    Pixel values are quantised to multiples of 1/255 so that the in-memory
    image and its 8-bit file rendering are identical.
    """
    rng = np.random.default_rng([spec.seed, index])
    hgt, wid = spec.height, spec.width
    base = rng.uniform(*spec.background)
    texture = gaussian_filter(rng.standard_normal((hgt, wid)), sigma=rng.uniform(1.5, 4.0))
    texture /= max(np.abs(texture).max(), 1e-9)
    img = base + 0.12 * texture

    n_words = int(rng.integers(spec.words[0], spec.words[1] + 1))
    boxes: list[Box] = []
    for _ in range(n_words):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x1, y1, x2, y2 = _place_word(rng, spec)
            cand = Box.from_corners(x1, y1, x2, y2)
            if all(iou(cand, b) <= spec.max_overlap
                   and (spec.gap is None or _separated(cand, b, spec.gap)) for b in boxes):
                break
        else:
            continue
        fg = rng.uniform(*spec.foreground)
        plate = fg - rng.uniform(0.2, 0.35)
        period = int(rng.integers(2, 5))
        duty = max(1, period // 2)
        cols = np.arange(x2 - x1)
        stripes = np.where((cols % period) < duty, fg, plate)
        img[y1:y2, x1:x2] = stripes[None, :]
        boxes.append(cand)

    img = img + spec.noise * rng.standard_normal((hgt, wid))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img[None, :, :], boxes


# ---------------------------------------------------------------------------
# file formats


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a ``(1, H, W)`` or ``(H, W)`` image in ``[0, 1]`` as binary P5."""
    img = np.asarray(image).reshape(image.shape[-2:])
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 graymap into a ``(1, H, W)`` float image."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (pix.astype(np.float64) / maxval)[None, :, :]


def box_to_int_corners(b: Box) -> tuple[int, int, int, int]:
    """Integer corners: floor for the top-left, ceil for the bottom-right."""
    x1, y1, x2, y2 = b.to_corners()
    return math.floor(x1), math.floor(y1), math.ceil(x2), math.ceil(y2)


def format_gt_lines(boxes: list[Box], transcription: str = "word") -> str:
    lines = []
    for b in boxes:
        x1, y1, x2, y2 = box_to_int_corners(b)
        lines.append(f'{x1},{y1},{x2},{y2},"{transcription}"')
    return "".join(line + "\n" for line in lines)


@dataclass
class Manifest:
    entries: list[tuple[Path, Path]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{i}\t{g}\n" for i, g in self.entries))

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        entries = []
        for line in path.read_text().splitlines():
            if line.strip():
                img, gt = line.split("\t")
                entries.append((path.parent / img, path.parent / gt))
        return cls(entries)


def scene_stem(index: int) -> str:
    return f"img_{index:05d}"


def render_dataset(spec: SceneSpec, n: int, out_dir: str | Path, start: int = 0) -> Manifest:
    """Write ``n`` scenes (indices ``start .. start+n-1``) plus ``manifest.txt``.

    Images go to ``<out_dir>/images/<stem>.pgm`` and ground truth to
    ``<out_dir>/gt/gt_<stem>.txt``. Manifest paths are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    rel = []
    for index in range(start, start + n):
        image, boxes = generate_scene(spec, index)
        stem = scene_stem(index)
        img_rel = Path("images") / f"{stem}.pgm"
        gt_rel = Path("gt") / f"gt_{stem}.txt"
        write_pgm(out_dir / img_rel, image)
        (out_dir / gt_rel).write_text(format_gt_lines(boxes))
        rel.append((img_rel, gt_rel))
    rel.sort(key=lambda e: str(e[0]))
    manifest = Manifest(rel)
    manifest.write(out_dir / "manifest.txt")
    return Manifest([(out_dir / i, out_dir / g) for i, g in rel])
