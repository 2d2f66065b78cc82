"""Detection matching, miss-rate/FPPI curves, log-average miss rate and the
toy accuracy delta.

Boxes are ``(x, y, w, h)`` in pixels with the origin at the top-left
corner. Text interchange is one box per line::

    frame_id x y w h [score]

with ``#`` starting a comment.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import compress_model, decompress_model
from .errors import CorruptStream, EmptyCurve, InvariantViolation, NoGroundTruth
from .nn_engine import accuracy

IOU_THRESHOLD = 0.5
MISS_RATE_FLOOR = 1e-4
REFERENCE_FPPI = tuple(10.0 ** (-2 + k / 4) for k in range(9))


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float
    score: float | None = None

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h) + (() if self.score is None else (self.score,))
        if not all(math.isfinite(v) for v in vals):
            raise InvariantViolation(f"box has a non-finite field: {self}")
        if not (self.w > 0 and self.h > 0):
            raise InvariantViolation(f"box needs w > 0 and h > 0, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: Box, b: Box) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MatchResult:
    true_positives: int
    false_positives: int
    misses: int

    def __iter__(self):
        return iter((self.true_positives, self.false_positives, self.misses))


def _by_score(dets: Sequence[Box]) -> list[Box]:
    # stable, so equal scores keep their input order
    return sorted(dets, key=lambda d: -(d.score if d.score is not None else -math.inf))


def match_flags(dets: Sequence[Box], gts: Sequence[Box], iou_threshold: float = IOU_THRESHOLD):
    """Greedy matching; returns (scores, is_tp) in processing order.

    Detections are visited by descending score. Each one takes the unmatched
    ground truth it overlaps most, if that overlap reaches the threshold.
    """
    order = _by_score(dets)
    free = list(gts)
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for i, d in enumerate(order):
        scores[i] = d.score if d.score is not None else -math.inf
        if not free:
            continue
        overlaps = [iou(d, g) for g in free]
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold:
            tp[i] = True
            free.pop(j)
    return scores, tp


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    _, tp = match_flags(dets, gts, iou_threshold)
    n_tp = int(tp.sum())
    return MatchResult(n_tp, len(tp) - n_tp, len(gts) - n_tp)


@dataclass(frozen=True)
class DetCurve:
    """Miss rate against false positives per frame, fppi strictly increasing."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(f), float(m)) for f, m in self.points)
        object.__setattr__(self, "points", pts)
        for f, m in pts:
            if not (f >= 0 and 0.0 <= m <= 1.0):
                raise InvariantViolation(f"bad curve point ({f}, {m})")
        for (f0, _), (f1, _) in zip(pts, pts[1:]):
            if not f1 > f0:
                raise InvariantViolation(f"fppi must be strictly increasing, got {f0} then {f1}")

    @property
    def fppi(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def miss_rate(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def __len__(self) -> int:
        return len(self.points)


FrameData = tuple[Sequence[Box], Sequence[Box]]  # (detections, ground truths)


def sweep_points(frames: Iterable[FrameData], iou_threshold: float = IOU_THRESHOLD) -> list[tuple[float, float]]:
    """(fppi, miss rate) after each distinct score threshold, high to low.

    Greedy matching visits detections by descending score, so the matches
    at threshold t are exactly the prefix of the full matching with score
    >= t. One matching pass per frame therefore serves every threshold.
    The first point, (0, 1), is the threshold above every score.
    """
    frames = list(frames)
    if not frames:
        raise NoGroundTruth("no frames to evaluate")
    n_gt = sum(len(g) for _, g in frames)
    if n_gt == 0:
        raise NoGroundTruth("ground truth is empty")
    scores, flags = [], []
    for dets, gts in frames:
        s, tp = match_flags(dets, gts, iou_threshold)
        scores.append(s)
        flags.append(tp)
    scores = np.concatenate(scores) if scores else np.empty(0)
    flags = np.concatenate(flags) if flags else np.empty(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    # one point per distinct score: the last index of each run
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if scores.size else []
    points = [(0.0, 1.0)]
    for e in ends:
        points.append((fp_cum[e] / len(frames), 1.0 - tp_cum[e] / n_gt))
    return points


def build_curve(frames: Iterable[FrameData], iou_threshold: float = IOU_THRESHOLD) -> DetCurve:
    """Curve over all score thresholds, one point per distinct fppi.

    Where several thresholds share an fppi the lowest miss rate is kept,
    which is the last of them since miss rate only falls as the threshold
    drops.
    """
    collapsed: list[tuple[float, float]] = []
    for f, m in sweep_points(frames, iou_threshold):
        if collapsed and collapsed[-1][0] == f:
            collapsed[-1] = (f, min(m, collapsed[-1][1]))
        else:
            collapsed.append((f, m))
    return DetCurve(tuple(collapsed))


def sample_miss_rates(curve: DetCurve, refs: Sequence[float] = REFERENCE_FPPI) -> np.ndarray:
    """Step lookup: miss rate at the largest fppi <= ref, 1.0 if there is none."""
    fppi = curve.fppi
    mr = curve.miss_rate
    pos = np.searchsorted(fppi, np.asarray(refs), side="right") - 1
    return np.where(pos >= 0, mr[np.maximum(pos, 0)], 1.0)


def lamr(curve: DetCurve, refs: Sequence[float] = REFERENCE_FPPI) -> float:
    """Geometric mean of the sampled miss rates, clamped to [1e-4, 1]."""
    if len(curve) == 0:
        raise EmptyCurve("cannot take the log-average miss rate of an empty curve")
    sampled = np.clip(sample_miss_rates(curve, refs), MISS_RATE_FLOOR, 1.0)
    if np.all(sampled == sampled[0]):
        # exp(log(c)) need not round-trip; the mean of a constant is exact
        return float(sampled[0])
    return math.exp(math.fsum(math.log(v) for v in sampled) / len(sampled))


def accuracy_delta(baseline, plan, dataset, seed: int = 0, split: str = "test") -> float:
    """Accuracy lost by compressing ``baseline`` with ``plan`` and decoding it again."""
    restored = decompress_model(compress_model(baseline, plan, seed))
    return accuracy(baseline, dataset, split) - accuracy(restored, dataset, split)


# -- text interchange ----------------------------------------------------------


def parse_boxes(lines: Iterable[str], source: str = "<input>") -> dict[str, list[Box]]:
    frames: dict[str, list[Box]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise CorruptStream(f"{source}:{lineno}: expected 'frame_id x y w h [score]', got {raw.strip()!r}")
        try:
            nums = [float(p) for p in parts[1:]]
            box = Box(*nums)
        except (ValueError, InvariantViolation) as exc:
            raise CorruptStream(f"{source}:{lineno}: {exc}") from None
        frames.setdefault(parts[0], []).append(box)
    return frames


def read_boxes(path) -> dict[str, list[Box]]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_boxes(fh, str(path))


def format_boxes(frames: Mapping[str, Sequence[Box]]) -> str:
    out = []
    for fid, boxes in frames.items():
        for b in boxes:
            fields = [fid] + [repr(float(v)) for v in (b.x, b.y, b.w, b.h)]
            if b.score is not None:
                fields.append(repr(float(b.score)))
            out.append(" ".join(fields))
    return "\n".join(out) + ("\n" if out else "")


def write_boxes(path, frames: Mapping[str, Sequence[Box]]) -> None:
    Path(path).write_text(format_boxes(frames), encoding="utf-8")


def pair_frames(dets: Mapping[str, Sequence[Box]], gts: Mapping[str, Sequence[Box]]) -> list[FrameData]:
    """Align detection and ground-truth files; a frame in either one counts."""
    ids = list(gts) + [f for f in dets if f not in gts]
    return [(dets.get(f, []), gts.get(f, [])) for f in ids]


def evaluate(dets: Mapping[str, Sequence[Box]], gts: Mapping[str, Sequence[Box]], iou_threshold: float = IOU_THRESHOLD):
    for fid, boxes in dets.items():
        if any(b.score is None for b in boxes):
            raise CorruptStream(f"detection in frame {fid!r} has no score")
    curve = build_curve(pair_frames(dets, gts), iou_threshold)
    return curve, lamr(curve)
