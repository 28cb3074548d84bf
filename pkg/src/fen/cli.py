"""Command-line front end: ``fen <command> --config <path> [--set key=value ...]``.

Configuration files hold one ``key = value`` per line; ``#`` starts a
comment. Flags given with ``--set`` override the file. Unknown keys are
rejected so that a typo cannot silently fall back to a default.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .evaluation import (PROTOCOLS, evaluate_protocol, format_detections, load_det_dir, load_gt_dir,
                         parse_gt_text)
from .geometry import centers_array, corners_array
from .nnkit import ParameterStore, load_checkpoint, save_checkpoint
from .pipeline import FENConfig, FENModel, detect_image
from .synthdata import Manifest, SceneSpec, read_pgm, render_dataset
from .pmstats import proposal_stats
from .training import TrainConfig, Trainer, loss_row

logger = logging.getLogger("fen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob the commands read. Toggles default to the full detector."""

    # reproducibility and optimisation
    seed: int = 0
    lr: float = 1e-2
    momentum: float = 0.9
    iterations: int = 3000
    clip_norm: float | None = 10.0
    lr_drop_at: float | None = None
    lr_decay: float = 0.1
    # detector toggles
    enable_fe_rpn: bool = True
    enable_hyper: bool = True
    enable_pm: bool = True
    enable_adaptive: bool = True
    enable_half_region: bool = True
    enable_multiscale: bool = False
    scales: tuple[float, ...] = (1.0,)
    score_threshold: float = 0.5
    final_nms: float = 0.3
    box_voting: float | None = 0.5
    # synthetic data
    scene_seed: int = 0
    scenes: int = 200
    scene_start: int = 0
    # paths
    data_dir: str = "data/train"
    image_dir: str = ""
    gt_dir: str = "data/test/gt"
    det_dir: str = "out/det"
    checkpoint: str = "out/model.fenk"
    log: str = "out/train_log.csv"
    report: str = ""
    protocol: str = "ic13"
    # proposal statistics
    pm_scenes: int = 500
    pm_iou: float = 0.5

    def model_config(self) -> FENConfig:
        return FENConfig(enable_fe_rpn=self.enable_fe_rpn, enable_hyper=self.enable_hyper,
                         enable_pm=self.enable_pm, enable_adaptive=self.enable_adaptive,
                         enable_half_region=self.enable_half_region,
                         enable_multiscale=self.enable_multiscale, scales=self.scales,
                         score_threshold=self.score_threshold, final_nms=self.final_nms,
                         box_voting=self.box_voting)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, lr=self.lr, momentum=self.momentum,
                           seed=self.seed, clip_norm=self.clip_norm, lr_drop_at=self.lr_drop_at,
                           lr_decay=self.lr_decay)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(seed=self.scene_seed)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("none", "") else float(raw)
        if kind == "tuple[float, ...]":
            vals = tuple(float(v) for v in raw.replace(" ", "").split(",") if v)
            if not vals:
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key} ({kind}): {raw!r}") from None


def parse_assignments(lines: Sequence[str], origin: str = "config") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    """Build a :class:`RunConfig` from a file plus ``key=value`` overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        raw.update(parse_assignments(p.read_text().splitlines(), str(p)))
    raw.update(parse_assignments(list(overrides), "--set"))
    kinds = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(kinds))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _convert(k, v, kinds[k]) for k, v in raw.items()}
    cfg = RunConfig(**values)
    if cfg.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {cfg.protocol!r}; expected one of {sorted(PROTOCOLS)}")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data access


def _load_manifest(data_dir: str) -> Manifest:
    path = Path(data_dir) / "manifest.txt"
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path} (run 'fen render' first)")
    manifest = Manifest.read(path)
    if len(manifest) == 0:
        raise DataError(f"dataset at {data_dir} is empty")
    return manifest


def load_scenes(data_dir: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """Images and center-form ground truth listed in ``<data_dir>/manifest.txt``."""
    scenes = []
    for img_path, gt_path in _load_manifest(data_dir).entries:
        try:
            image = read_pgm(img_path)
            ann = parse_gt_text(gt_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        scenes.append((image, centers_array(ann.boxes[ann.care])))
    return scenes


def _image_paths(cfg: RunConfig) -> list[Path]:
    if cfg.image_dir:
        paths = sorted(Path(cfg.image_dir).glob("*.pgm"))
        if not paths:
            raise DataError(f"no .pgm images in {cfg.image_dir}")
        return paths
    return [img for img, _ in _load_manifest(cfg.data_dir).entries]


def _load_params(cfg: RunConfig, model: FENModel) -> ParameterStore:
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    try:
        model.check_params(params)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return params


# ---------------------------------------------------------------------------
# commands


def cmd_render(cfg: RunConfig) -> int:
    manifest = render_dataset(cfg.scene_spec(), cfg.scenes, cfg.data_dir, start=cfg.scene_start)
    print(f"rendered {len(manifest)} scenes to {cfg.data_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    scenes = load_scenes(cfg.data_dir)
    model = FENModel(cfg.model_config())
    params = model.init_params(cfg.seed)
    trainer = Trainer(model, params, cfg.train_config())
    Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.log).parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with open(cfg.log, "w") as log:
        log.write("iter,total,cls,loc,N\n")
        trainer.fit(scenes, log=lambda it, res: log.write(loss_row(it, res) + "\n"))
    save_checkpoint(params, cfg.checkpoint)
    print(f"trained {cfg.iterations} iterations on {len(scenes)} scenes in "
          f"{time.perf_counter() - start:.1f}s -> {cfg.checkpoint}")
    return EXIT_OK


def cmd_detect(cfg: RunConfig) -> int:
    model = FENModel(cfg.model_config())
    params = _load_params(cfg, model)
    out = Path(cfg.det_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(cfg)
    for path in paths:
        try:
            image = read_pgm(path)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        det = detect_image(image, params, model=model)
        (out / f"res_{path.stem}.txt").write_text(format_detections(corners_array(det.boxes), det.scores))
    print(f"wrote {len(paths)} detection files to {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    gt_dir, det_dir = Path(cfg.gt_dir), Path(cfg.det_dir)
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory not found: {gt_dir}")
    try:
        gts = load_gt_dir(gt_dir)
        dets = load_det_dir(det_dir) if det_dir.is_dir() else {}
        report = evaluate_protocol(gts, dets, cfg.protocol)
    except (KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    text = "protocol,recall,precision,fmeasure\n" + report.csv_line() + "\n"
    if cfg.report:
        Path(cfg.report).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    start = time.perf_counter()
    results = gradcheck.run_suite(cfg.seed)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_pmstats(cfg: RunConfig) -> int:
    model = FENModel(cfg.model_config())
    if Path(cfg.checkpoint).is_file():
        params = _load_params(cfg, model)
    else:
        logger.warning("no checkpoint at %s; using the seed-%d initialisation", cfg.checkpoint, cfg.seed)
        params = model.init_params(cfg.seed)
    stats = proposal_stats(model, params, cfg.scene_spec(), cfg.pm_scenes, start=cfg.scene_start,
                           iou_threshold=cfg.pm_iou)
    print("mining,positives,negatives,ratio,positive_fraction")
    for row in stats.rows():
        print(row)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "pmstats": cmd_pmstats,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fen", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"fen: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"fen: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
