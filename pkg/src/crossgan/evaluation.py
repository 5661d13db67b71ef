"""Stereo-consistency measurement.

Translation should keep the scene geometry of the input pair, so the input
pair's disparity (ground truth, or SAD block matching when none is known) is
used to warp the translated right image onto the translated left image. The
mean absolute residual over valid pixels is the consistency error.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .data import StereoPair


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass(frozen=True)
class EvalConfig:
    block: int = 9
    max_disparity: int = 8
    min_variance: float = 1e-4
    max_sad_per_pixel: float = 0.25
    min_valid_fraction: float = 0.05
    tie_tolerance: float = 0.02

    def __post_init__(self):
        if self.block < 3 or self.block % 2 == 0:
            raise ValueError("block must be odd and >= 3")
        if self.max_disparity < 0:
            raise ValueError("max_disparity must be >= 0")
        if not 0 <= self.min_valid_fraction <= 1:
            raise ValueError("min_valid_fraction must lie in [0, 1]")
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _box_mean(a: np.ndarray, block: int) -> np.ndarray:
    return uniform_filter(a, size=block, mode="nearest")


def block_match_disparity(pair: StereoPair, block: int = 9, max_disparity: int = 8,
                          min_variance: float = 1e-4, max_sad_per_pixel: float = 0.25) -> DisparityMap:
    """Winner-take-all SAD matching of left blocks against the shifted right image.

    A pixel is invalid when its block is flat (grayscale variance below
    ``min_variance``), when the best mean absolute difference exceeds
    ``max_sad_per_pixel``, when it lies within ``max_disparity`` of the left
    border, or when its block crosses the image boundary.
    """
    left, right = pair.left.astype(np.float64), pair.right.astype(np.float64)
    h, w = left.shape[:2]
    if block < 3 or block % 2 == 0:
        raise ValueError("block must be odd and >= 3")
    if h < block or w < block:
        raise ValueError(f"image {h}x{w} smaller than block {block}")
    if max_disparity >= w / 4:
        raise ValueError(f"max_disparity must be < W/4 = {w / 4}")

    costs = np.full((max_disparity + 1, h, w), np.inf)
    for d in range(max_disparity + 1):
        diff = np.full((h, w), np.inf)
        diff[:, d:] = np.abs(left[:, d:] - right[:, :w - d]).mean(axis=2)
        # mean over the block; columns without a full match stay infinite
        costs[d] = _box_mean(np.where(np.isfinite(diff), diff, 0.0), block)
        costs[d][:, :d + block // 2] = np.inf
    best = np.argmin(costs, axis=0)
    best_cost = np.take_along_axis(costs, best[None], axis=0)[0]

    gray = left.mean(axis=2)
    var = _box_mean(gray ** 2, block) - _box_mean(gray, block) ** 2
    r = block // 2
    valid = (var >= min_variance) & (best_cost <= max_sad_per_pixel)
    valid[:, :max_disparity + r] = False
    valid[:, w - r:] = False
    valid[:r, :] = False
    valid[h - r:, :] = False
    return DisparityMap(best.astype(np.float32), valid)


def warp_by_disparity(img: np.ndarray, d) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``img`` at ``x - d(x)`` with linear interpolation.

    Warping the right image with the left-view disparity reconstructs the
    left image. Returns ``(warped, mask)``; samples outside the image (or at
    invalid disparities) are masked out.
    """
    if isinstance(d, DisparityMap):
        disp, dvalid = d.values, d.valid
    else:
        disp, dvalid = np.asarray(d, dtype=np.float64), None
    h, w = img.shape[:2]
    if disp.shape != (h, w):
        raise ValueError(f"disparity {disp.shape} does not match image {h}x{w}")
    xs = np.arange(w)[None, :] - disp
    mask = (xs >= 0) & (xs <= w - 1)
    xc = np.clip(xs, 0, w - 1)
    x0 = np.floor(xc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    t = (xc - x0)[..., None]
    rows = np.arange(h)[:, None]
    out = img[rows, x0] * (1 - t) + img[rows, x1] * t
    if dvalid is not None:
        mask &= dvalid
    return out.astype(np.float32), mask


@dataclass
class FrameResult:
    error: float
    valid_fraction: float
    reliable: bool
    stem: str = ""


@dataclass
class ConsistencyReport:
    frames: list[FrameResult] = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([f.error for f in self.frames], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.errors)) if self.frames else float("nan")

    @property
    def median(self) -> float:
        return float(np.nanmedian(self.errors)) if self.frames else float("nan")

    @property
    def std(self) -> float:
        return float(np.nanstd(self.errors)) if self.frames else float("nan")

    @property
    def valid_fraction(self) -> float:
        return float(np.mean([f.valid_fraction for f in self.frames])) if self.frames else 0.0

    @property
    def unreliable(self) -> list[str]:
        return [f.stem for f in self.frames if not f.reliable]

    def summary(self) -> dict:
        return {"frames": len(self.frames), "mean": self.mean, "median": self.median, "std": self.std,
                "valid_fraction": self.valid_fraction, "unreliable": self.unreliable}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stem", "error", "valid_fraction", "reliable"])
        for f in self.frames:
            w.writerow([f.stem, f"{f.error:.6f}", f"{f.valid_fraction:.6f}", int(f.reliable)])
        return buf.getvalue()


def frame_consistency(input_pair: StereoPair, output_pair: StereoPair, cfg: EvalConfig = EvalConfig(),
                      stem: str = "") -> FrameResult:
    shapes = {input_pair.left.shape, input_pair.right.shape, output_pair.left.shape, output_pair.right.shape}
    if len(shapes) != 1:
        raise ValueError(f"all four images must share dimensions, got {shapes}")
    if input_pair.disparity_gt is not None:
        valid = np.ones(input_pair.disparity_gt.shape, bool)
        if input_pair.visible is not None:
            valid &= input_pair.visible
        disp = DisparityMap(input_pair.disparity_gt, valid)
    else:
        disp = block_match_disparity(input_pair, cfg.block, cfg.max_disparity, cfg.min_variance,
                                     cfg.max_sad_per_pixel)
    warped, mask = warp_by_disparity(output_pair.right, disp)
    frac = float(mask.mean())
    if mask.any():
        err = float(np.abs(warped - output_pair.left).mean(axis=2)[mask].mean())
    else:
        err = float("nan")
    return FrameResult(err, frac, frac >= cfg.min_valid_fraction, stem or input_pair.scene_id)


def stereo_consistency_error(input_pairs, output_pairs, cfg: EvalConfig = EvalConfig()) -> ConsistencyReport:
    """Warp error of the output pair(s) along the input pair(s)' disparity.

    Frames whose valid-pixel fraction falls below ``cfg.min_valid_fraction``
    are kept in the report and listed as unreliable.
    """
    if isinstance(input_pairs, StereoPair):
        input_pairs, output_pairs = [input_pairs], [output_pairs]
    if len(input_pairs) != len(output_pairs):
        raise ValueError("input and output frame counts differ")
    return ConsistencyReport([frame_consistency(i, o, cfg) for i, o in zip(input_pairs, output_pairs)])


@dataclass
class ComparisonRow:
    seed: int
    stem: str
    error_a: float
    error_b: float
    outcome: str  # "win" (A better), "tie", "loss"
    reliable: bool


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    seeds: list[int]

    def per_seed_means(self) -> dict[int, tuple[float, float]]:
        out = {}
        for s in self.seeds:
            rs = [r for r in self.rows if r.seed == s]
            out[s] = (float(np.nanmean([r.error_a for r in rs])), float(np.nanmean([r.error_b for r in rs])))
        return out

    def counts(self) -> dict[str, int]:
        return {k: sum(r.outcome == k for r in self.rows) for k in ("win", "tie", "loss")}

    def summary(self) -> dict:
        means = self.per_seed_means()
        return {
            "rows": len(self.rows),
            "seeds": self.seeds,
            "per_seed_mean_a": [means[s][0] for s in self.seeds],
            "per_seed_mean_b": [means[s][1] for s in self.seeds],
            "median_per_seed_a": float(np.median([means[s][0] for s in self.seeds])),
            "median_per_seed_b": float(np.median([means[s][1] for s in self.seeds])),
            "counts": self.counts(),
            "unreliable_rows": sum(not r.reliable for r in self.rows),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "stem", "error_a", "error_b", "outcome", "reliable"])
        for r in self.rows:
            w.writerow([r.seed, r.stem, f"{r.error_a:.6f}", f"{r.error_b:.6f}", r.outcome, int(r.reliable)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def classify(err_a: float, err_b: float, tol: float) -> str:
    if abs(err_a - err_b) <= tol * max(abs(err_a), abs(err_b)):
        return "tie"
    return "win" if err_a < err_b else "loss"


def compare_models(test_pairs: Sequence[StereoPair], translate_a: Callable, translate_b: Callable,
                   seeds: Sequence[int], conditions: Sequence[np.ndarray], cfg: EvalConfig = EvalConfig(),
                   stems: Sequence[str] | None = None) -> ComparisonTable:
    """Translate every test pair with both models under matched condition images.

    ``translate_a`` / ``translate_b`` map ``(pair, condition) -> StereoPair``.
    For each seed, one condition image per frame is drawn from
    ``conditions`` and shared by both models.
    """
    stems = list(stems) if stems is not None else [p.scene_id or f"{i:05d}" for i, p in enumerate(test_pairs)]
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for stem, pair in zip(stems, test_pairs):
            cond = conditions[int(rng.integers(len(conditions)))]
            fa = frame_consistency(pair, translate_a(pair, cond), cfg, stem)
            fb = frame_consistency(pair, translate_b(pair, cond), cfg, stem)
            rows.append(ComparisonRow(seed, stem, fa.error, fb.error, classify(fa.error, fb.error, cfg.tie_tolerance),
                                      fa.reliable and fb.reliable))
    return ComparisonTable(rows, list(seeds))


def side_by_side(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Tile images into a grid (rows of equally sized HxWx3 images)."""
    return np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0)
