"""Datasets, augmentation, and a synthetic two-domain stereo generator.

Images are float32 numpy arrays of shape (H, W, 3) with values in [-1, 1].
Disparity is stored in the left view: the left pixel at column ``x`` is seen
at column ``x - d`` in the right image.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as TF
from PIL import Image as PILImage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    disparity_gt: np.ndarray | None = None
    # True where the left pixel is visible in the right view (synthetic data only)
    visible: np.ndarray | None = None
    scene_id: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")
        if self.disparity_gt is not None and self.disparity_gt.shape != self.left.shape[:2]:
            raise ValueError("disparity_gt must be H x W")


Sample = Union[StereoPair, np.ndarray]


@dataclass
class DomainDataset:
    domain: str  # "X" or "Y"
    samples: list
    mode: str  # "stereo" or "mono"
    stems: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.domain not in ("X", "Y"):
            raise ValueError(f"domain must be X or Y, got {self.domain!r}")
        if self.mode not in ("stereo", "mono"):
            raise ValueError(f"mode must be stereo or mono, got {self.mode!r}")
        if not self.samples:
            raise ValueError(f"empty {self.mode} dataset for domain {self.domain}")
        want = StereoPair if self.mode == "stereo" else np.ndarray
        if not all(isinstance(s, want) for s in self.samples):
            raise ValueError(f"all samples of a {self.mode} dataset must be {want.__name__}")
        if not self.stems:
            self.stems = [f"{i:05d}" for i in range(len(self.samples))]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def left_view(self) -> "DomainDataset":
        """Mono dataset of the left eyes; right images are not touched."""
        if self.mode == "mono":
            return self
        return DomainDataset(self.domain, [s.left for s in self.samples], "mono", list(self.stems))


@dataclass(frozen=True)
class AugmentConfig:
    crop_height: int = 256
    crop_width: int = 512
    flip_probability: float = 0.5
    intensity_jitter: tuple[float, float] = (0.8, 1.2)
    # upper bound on crop-window / output size; None = largest window that fits
    max_scale: float | None = None

    def __post_init__(self):
        if self.crop_height % 4 or self.crop_width % 4 or self.crop_height <= 0 or self.crop_width <= 0:
            raise ValueError("crop dims must be positive and divisible by 4")
        lo, hi = self.intensity_jitter
        if not 0 < lo <= hi:
            raise ValueError("intensity_jitter must be a positive range lo <= hi")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.max_scale is not None and self.max_scale < 1:
            raise ValueError("max_scale must be >= 1")


# -- image io ---------------------------------------------------------------

def to_unit(img8: np.ndarray) -> np.ndarray:
    return img8.astype(np.float32) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return to_unit(np.asarray(im.convert("RGB")))


def write_image(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def _images_by_stem(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _domain_from_path(root: Path) -> str | None:
    m = re.search(r"([XY])$", root.name)
    return m.group(1) if m else None


def load_dataset(root_path, mode: str, domain: str | None = None) -> DomainDataset:
    """Load ``root/{left,right[,disparity]}/stem.*`` (stereo) or ``root/stem.*`` (mono)."""
    root = Path(root_path)
    domain = domain or _domain_from_path(root)
    if domain is None:
        raise ValueError(f"cannot infer domain from {root}; pass domain='X' or 'Y'")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    if mode == "mono":
        files = _images_by_stem(root)
        if not files:
            raise ValueError(f"no images in {root}")
        stems = sorted(files)
        return DomainDataset(domain, [read_image(files[s]) for s in stems], "mono", stems)
    if mode != "stereo":
        raise ValueError(f"unknown mode {mode!r}")
    for sub in ("left", "right"):
        if not (root / sub).is_dir():
            raise FileNotFoundError(f"stereo dataset {root} has no {sub}/ directory")
    lefts, rights = _images_by_stem(root / "left"), _images_by_stem(root / "right")
    orphans = sorted(set(lefts) ^ set(rights))
    if orphans:
        s = orphans[0]
        side = "left" if s in lefts else "right"
        raise ValueError(f"orphan {side} image {s!r} in {root} has no counterpart")
    if not lefts:
        raise ValueError(f"no stereo pairs in {root}")
    disp_dir = root / "disparity"
    samples = []
    for stem in sorted(lefts):
        disp = vis = None
        if (disp_dir / f"{stem}.pfm").exists():
            disp = read_pfm(disp_dir / f"{stem}.pfm")
        if (root / "visible" / f"{stem}.png").exists():
            vis = np.asarray(PILImage.open(root / "visible" / f"{stem}.png").convert("L")) > 127
        samples.append(StereoPair(read_image(lefts[stem]), read_image(rights[stem]), disp, vis, scene_id=stem))
    return DomainDataset(domain, samples, "stereo", sorted(lefts))


def save_dataset(ds: DomainDataset, root_path) -> None:
    root = Path(root_path)
    if ds.mode == "mono":
        root.mkdir(parents=True, exist_ok=True)
        for stem, img in zip(ds.stems, ds.samples):
            write_image(root / f"{stem}.png", img)
        return
    for sub in ("left", "right"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for stem, pair in zip(ds.stems, ds.samples):
        write_image(root / "left" / f"{stem}.png", pair.left)
        write_image(root / "right" / f"{stem}.png", pair.right)
        if pair.disparity_gt is not None:
            (root / "disparity").mkdir(exist_ok=True)
            write_pfm(root / "disparity" / f"{stem}.pfm", pair.disparity_gt)
        if pair.visible is not None:
            (root / "visible").mkdir(exist_ok=True)
            PILImage.fromarray(pair.visible.astype(np.uint8) * 255).save(root / "visible" / f"{stem}.png")


# -- augmentation -----------------------------------------------------------

def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape[:2] == (h, w):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img))
    t = t.permute(2, 0, 1)[None] if t.dim() == 3 else t[None, None]
    t = TF.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    t = t[0].permute(1, 2, 0) if img.ndim == 3 else t[0, 0]
    return t.numpy()


def _crop_window(src_h: int, src_w: int, cfg: AugmentConfig, rng: np.random.Generator):
    limit = min(src_h / cfg.crop_height, src_w / cfg.crop_width)
    if limit < 1:
        raise ValueError(f"source {src_h}x{src_w} smaller than crop {cfg.crop_height}x{cfg.crop_width}")
    if cfg.max_scale is not None:
        limit = min(limit, cfg.max_scale)
    scale = rng.uniform(1.0, limit)
    wh = min(src_h, int(round(cfg.crop_height * scale)))
    ww = min(src_w, int(round(cfg.crop_width * scale)))
    top = int(rng.integers(0, src_h - wh + 1))
    left = int(rng.integers(0, src_w - ww + 1))
    return top, left, wh, ww


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random crop + rescale, horizontal flip, multiplicative intensity jitter.

    Both eyes of a stereo pair share the crop window, scale and intensity
    factor. A stereo flip mirrors both images and swaps left/right so that
    disparities stay positive; the ground truth is dropped in that case since
    it would have to be re-expressed in the other view.
    """
    stereo = isinstance(sample, StereoPair)
    src = sample.left if stereo else sample
    h, w = src.shape[:2]
    top, left, wh, ww = _crop_window(h, w, cfg, rng)
    flip = rng.random() < cfg.flip_probability
    factor = rng.uniform(*cfg.intensity_jitter)

    def tx(img):
        out = _resize(img[top:top + wh, left:left + ww], cfg.crop_height, cfg.crop_width)
        return np.clip(out * factor, -1.0, 1.0).astype(np.float32)

    if not stereo:
        out = tx(sample)
        return np.ascontiguousarray(out[:, ::-1]) if flip else out

    L, R = tx(sample.left), tx(sample.right)
    disp = vis = None
    if sample.disparity_gt is not None:
        disp = _resize(sample.disparity_gt[top:top + wh, left:left + ww].astype(np.float32),
                       cfg.crop_height, cfg.crop_width) * (cfg.crop_width / ww)
    if sample.visible is not None and (wh, ww) == (cfg.crop_height, cfg.crop_width):
        vis = sample.visible[top:top + wh, left:left + ww]
    if flip:
        return StereoPair(np.ascontiguousarray(R[:, ::-1]), np.ascontiguousarray(L[:, ::-1]),
                          scene_id=sample.scene_id)
    return StereoPair(L, R, disp, vis, scene_id=sample.scene_id)


def mirror_pair(pair: StereoPair) -> StereoPair:
    """Deterministic stereo flip (mirror both eyes and swap them)."""
    return StereoPair(np.ascontiguousarray(pair.right[:, ::-1]), np.ascontiguousarray(pair.left[:, ::-1]),
                      scene_id=pair.scene_id)


def sample_batch(ds: DomainDataset, rng: np.random.Generator):
    """Uniformly random single sample (batch size is always 1)."""
    return ds.samples[int(rng.integers(len(ds)))]


# -- synthetic stereo scenes ------------------------------------------------

def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1, 1, size=(gh, gw)).astype(np.float32)
    t = torch.from_numpy(grid)[None, None]
    up = TF.interpolate(t, size=(gh * cell, gw * cell), mode="bicubic", align_corners=False)[0, 0].numpy()
    return up[:h, :w]


# Per-domain colour palettes in [-1, 1]: pale silicone tones for X, darker
# tissue reds for Y. Background uses the first entry.
PALETTES = {
    "X": np.array([[0.55, 0.25, 0.25], [0.70, 0.45, 0.40], [0.35, 0.10, 0.15], [0.80, 0.70, 0.60]], np.float32),
    "Y": np.array([[0.10, -0.55, -0.55], [0.45, -0.25, -0.30], [-0.15, -0.70, -0.65], [0.60, 0.05, -0.05]],
                  np.float32),
}


def _layer_texture(rng, domain: str, h: int, w: int, background: bool = False) -> np.ndarray:
    palette = PALETTES[domain]
    k = 0 if background else int(rng.integers(1, len(palette)))
    base = palette[k] + rng.normal(0.0, 0.05, size=3).astype(np.float32)
    if domain == "X":
        return np.broadcast_to(base, (h, w, 3)).astype(np.float32)
    tint = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    coarse = _value_noise(rng, h, w, int(rng.integers(6, 14)))
    fine = _value_noise(rng, h, w, 2)
    tex = base + 0.25 * coarse[..., None] * tint + 0.12 * fine[..., None]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.5, 4.0)
        tex += 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
    return np.clip(tex, -1, 1).astype(np.float32)


def _shape_mask(rng, h: int, w: int, x_offset: int) -> np.ndarray:
    """Ellipse or rectangle in the extended canvas (left-view coordinates)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    xx -= x_offset
    full_w = w - x_offset
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * full_w
    ry, rx = rng.uniform(0.12, 0.35) * h, rng.uniform(0.08, 0.25) * full_w
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def synth_pair(rng: np.random.Generator, domain: str, size: tuple[int, int], max_disparity: int,
               n_shapes: tuple[int, int] = (2, 5), background_disparity: int | None = None,
               scene_id: str = "") -> StereoPair:
    h, w = size
    m = max_disparity
    # extended canvas: column c corresponds to left-view x = c - m
    ew = w + 2 * m
    n = int(rng.integers(n_shapes[0], n_shapes[1] + 1))
    bg_d = int(rng.integers(0, max(1, m // 3) + 1)) if background_disparity is None else int(background_disparity)
    disparities = sorted(int(v) for v in rng.integers(bg_d, m + 1, size=n))
    layers = [(bg_d, np.ones((h, ew), bool), _layer_texture(rng, domain, h, ew, background=True))]
    for d in disparities:
        layers.append((d, _shape_mask(rng, h, ew, m), _layer_texture(rng, domain, h, ew)))

    left = np.zeros((h, w, 3), np.float32)
    right = np.zeros((h, w, 3), np.float32)
    disp = np.zeros((h, w), np.float32)
    lid = np.zeros((h, w), np.int32)
    rid = np.zeros((h, w), np.int32)
    for k, (d, mask, tex) in enumerate(layers):
        # left pixel x samples canvas column x + m; right pixel x sees left content at x + d
        lm, lt = mask[:, m:m + w], tex[:, m:m + w]
        rm, rt = mask[:, m + d:m + d + w], tex[:, m + d:m + d + w]
        left[lm], disp[lm], lid[lm] = lt[lm], d, k
        right[rm], rid[rm] = rt[rm], k
    xs = np.arange(w)[None, :] - disp.astype(np.int64)
    inside = xs >= 0
    visible = inside & (np.take_along_axis(rid, np.clip(xs, 0, w - 1), axis=1) == lid)
    return StereoPair(left, right, disp, visible, scene_id=scene_id)


def synth_generate(n: int, domain: str, size: tuple[int, int] = (64, 128), max_disparity: int = 8,
                   seed: int | Sequence[int] = 0, n_shapes: tuple[int, int] = (2, 5),
                   background_disparity: int | None = None, prefix: str = "") -> DomainDataset:
    """Render ``n`` layered stereo scenes with exact disparity.

    Domain X uses flat fills; domain Y uses procedural texture, fine noise and
    specular spots. All appearance is attached to the layers, so the right
    view is an exact per-layer shift of the left view.
    """
    h, w = size
    if max_disparity < 0 or max_disparity >= w / 8:
        raise ValueError(f"max_disparity must satisfy 0 <= d < W/8 = {w / 8}")
    if h % 4 or w % 4:
        raise ValueError("size must be divisible by 4")
    if n < 1:
        raise ValueError("n must be >= 1")
    entropy = [int(v) for v in np.atleast_1d(seed)] + [0 if domain == "X" else 1]
    seqs = np.random.SeedSequence(entropy).spawn(n)
    stems = [f"{prefix}{domain}{i:04d}" for i in range(n)]
    samples = [synth_pair(np.random.default_rng(s), domain, size, max_disparity, n_shapes,
                          background_disparity, scene_id=stem)
               for s, stem in zip(seqs, stems)]
    return DomainDataset(domain, samples, "stereo", stems)

