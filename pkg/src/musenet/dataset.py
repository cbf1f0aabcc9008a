"""Procedural cross-view dataset.

Each identity is a top-down scene: textured ground, a handful of colored
rectangular buildings, one landmark triangle. The satellite image is the
center crop of the scene canvas; drone views resample the same canvas under
random rotation, zoom and shift plus mild brightness jitter, so every view
of one identity shares content by construction. Train, test and distractor
identities are disjoint; distractors get a satellite image only.

On-disk layout: <root>/{train,test,distractor}/{satellite,drone}/<id>/<n>.ppm
plus <root>/manifest.tsv mapping id -> split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import weather as W
from .errors import DataIOError, NumericalError, UsageError
from .model import normalize_images
from .ppm import read_ppm, write_ppm
from .tensor import Tensor

CANVAS_FACTOR = 2.5
CROP_PAD = 4
SPLITS = ("train", "test", "distractor")

OVERLAP_TRIPLETS = 120
OVERLAP_THRESHOLD = 0.95

# styling_stream key for the evaluation-only fog+rain+snow mixture
_COMPOSITE_STREAM_KEY = 10


class Task(Enum):
    DRONE_TO_SAT = "d2s"
    SAT_TO_DRONE = "s2d"


@dataclass
class DatasetSpec:
    train_ids: int = 32
    test_ids: int = 16
    views_per_id: int = 8
    image_size: int = 64
    distractor_ids: int = 8
    seed: int = W.DEFAULT_SEED

    def validate(self):
        if min(self.train_ids, self.test_ids, self.views_per_id) < 1 or self.distractor_ids < 0:
            raise UsageError("dataset spec counts must be positive (distractors >= 0)")
        if self.image_size < 32 or self.image_size % 16:
            raise UsageError(f"image_size must be a multiple of 16 >= 32, got {self.image_size}")
        return self


@dataclass
class GeoSample:
    image: np.ndarray
    identity: int
    platform: W.Platform
    style: W.StyleKind
    style_label: int

    def __post_init__(self):
        if self.platform is W.Platform.SATELLITE and (
                self.style is not W.StyleKind.NORMAL or self.style_label != 0):
            raise UsageError("satellite samples are style Normal / label 0 by definition")


@dataclass
class Batch:
    images: Tensor           # 2N x 3 x S x S, first N satellite then N drone
    identity_labels: np.ndarray
    style_labels: np.ndarray


@dataclass
class EvalSet:
    query_images: np.ndarray   # Q x S x S x 3 uint8
    query_ids: np.ndarray
    gallery_images: np.ndarray
    gallery_ids: np.ndarray


# ---------------------------------------------------------------------------
# scene synthesis


def _fill_convex(img, vertices, color):
    """Rasterize a convex polygon by intersecting edge half-planes."""
    h, w, _ = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        inside &= (xs - x0) * (y1 - y0) - (ys - y0) * (x1 - x0) >= 0
    img[inside] = color


def _rect_vertices(cx, cy, half_w, half_h, angle):
    c, s = np.cos(angle), np.sin(angle)
    corners = [(-half_w, -half_h), (half_w, -half_h), (half_w, half_h), (-half_w, half_h)]
    return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in corners]


# The palette is shared across identities and the per-scene ground tint
# deviation is small: identity must not be recoverable from global color
# statistics alone (an untrained net retrieves near chance), yet stays
# learnable from local structure (placement, size, orientation, color mix).
GROUND_TINT = np.array([92.0, 96.0, 86.0])
GROUND_TINT_DEV = 8.0
# high luminance and hue contrast against the ground: identity structure has
# to stay readable after a fog wash or a 0.3x brightness crush
BUILDING_PALETTE = np.array([
    (245, 50, 40), (40, 90, 235), (250, 215, 30), (30, 200, 70),
    (200, 40, 210), (250, 250, 245), (12, 12, 18), (45, 230, 220),
], dtype=np.float64)
LANDMARK_COLOR = np.array([255.0, 120.0, 0.0])


def _render_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    canvas = int(size * CANVAS_FACTOR)
    img = np.empty((canvas, canvas, 3))
    img[:] = GROUND_TINT + rng.uniform(-GROUND_TINT_DEV, GROUND_TINT_DEV, 3)
    # blocky low-frequency ground texture plus fine noise
    cell = max(canvas // 16, 2)
    lo = rng.uniform(-8, 8, size=(canvas // cell + 1, canvas // cell + 1, 3))
    img += np.kron(lo, np.ones((cell, cell, 1)))[:canvas, :canvas]
    img += rng.uniform(-5, 5, size=(canvas, canvas, 1))

    center = canvas / 2.0
    spread = size * 0.30  # structures stay inside every view's window
    n_buildings = int(rng.integers(3, 8))
    color_idx = rng.choice(len(BUILDING_PALETTE), n_buildings, replace=False)
    for bi in range(n_buildings):
        cx = center + rng.uniform(-spread, spread)
        cy = center + rng.uniform(-spread, spread)
        half_w = rng.uniform(size * 0.11, size * 0.21)
        half_h = rng.uniform(size * 0.11, size * 0.21)
        angle = 0.0 if rng.random() < 0.5 else rng.uniform(0, np.pi)
        color = BUILDING_PALETTE[color_idx[bi]] + rng.uniform(-12, 12, 3)
        _fill_convex(img, _rect_vertices(cx, cy, half_w, half_h, angle), color)

    # one landmark triangle anchors orientation; its color is shared so it
    # carries no global-statistic identity signal
    cx = center + rng.uniform(-spread, spread) * 0.6
    cy = center + rng.uniform(-spread, spread) * 0.6
    r = size * rng.uniform(0.18, 0.26)
    phase = rng.uniform(0, 2 * np.pi)
    tri = [(cx + r * np.cos(phase + k * 2 * np.pi / 3),
            cy + r * np.sin(phase + k * 2 * np.pi / 3)) for k in range(3)]
    _fill_convex(img, tri, LANDMARK_COLOR)
    return np.clip(img, 0, 255).astype(np.uint8)


def _affine_sample(src: np.ndarray, out_size: int, theta: float, scale: float,
                   translate: tuple[float, float]) -> np.ndarray:
    """Bilinear resample: output pixel p maps to center + R(theta) p/scale + t."""
    h, w, _ = src.shape
    half = out_size / 2.0
    coords = np.arange(out_size) - half + 0.5
    dx, dy = np.meshgrid(coords, coords)
    c, s = np.cos(theta), np.sin(theta)
    sx = w / 2.0 + (c * dx - s * dy) / scale + translate[0]
    sy = h / 2.0 + (s * dx + c * dy) / scale + translate[1]
    sx = np.clip(sx - 0.5, 0, w - 1.001)
    sy = np.clip(sy - 0.5, 0, h - 1.001)
    x0 = sx.astype(int)
    y0 = sy.astype(int)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    img = src.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _drone_view(canvas_img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi)
    scale = rng.uniform(0.7, 1.1)
    translate = rng.uniform(-0.1, 0.1, size=2) * size
    view = _affine_sample(canvas_img, size, theta, scale, tuple(translate))
    view *= rng.uniform(0.95, 1.05)  # mild photometric jitter
    return np.clip(np.rint(view), 0, 255).astype(np.uint8)


def _center_crop(canvas_img: np.ndarray, size: int) -> np.ndarray:
    c = canvas_img.shape[0] // 2
    return canvas_img[c - size // 2:c + size // 2, c - size // 2:c + size // 2].copy()


# ---------------------------------------------------------------------------
# generation and the structural self-check


def _split_of(spec: DatasetSpec, gid: int) -> str:
    if gid < spec.train_ids:
        return "train"
    if gid < spec.train_ids + spec.test_ids:
        return "test"
    return "distractor"


def generate_dataset(spec: DatasetSpec, root, self_check: bool = True) -> Path:
    """Render and write the full dataset tree; deterministic given spec.seed."""
    spec.validate()
    root = Path(root)
    total = spec.train_ids + spec.test_ids + spec.distractor_ids
    satellites: dict[int, np.ndarray] = {}
    drone_views: dict[int, list] = {}
    try:
        for split in SPLITS:
            (root / split / "satellite").mkdir(parents=True, exist_ok=True)
            (root / split / "drone").mkdir(parents=True, exist_ok=True)
        for gid in range(total):
            split = _split_of(spec, gid)
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([spec.seed, gid])))
            canvas = _render_scene(spec.image_size, rng)
            sat_dir = root / split / "satellite" / f"{gid:04d}"
            sat_dir.mkdir(exist_ok=True)
            sat = _center_crop(canvas, spec.image_size)
            write_ppm(sat_dir / "0.ppm", sat)
            if split == "distractor":
                continue
            satellites[gid] = sat
            drone_dir = root / split / "drone" / f"{gid:04d}"
            drone_dir.mkdir(exist_ok=True)
            views = [_drone_view(canvas, spec.image_size, rng)
                     for _ in range(spec.views_per_id)]
            drone_views[gid] = views
            for v, view in enumerate(views):
                write_ppm(drone_dir / f"{v}.ppm", view)
        with open(root / "manifest.tsv", "w", encoding="ascii") as fh:
            for gid in range(total):
                fh.write(f"{gid:04d}\t{_split_of(spec, gid)}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write dataset under {root}: {exc}") from exc

    if self_check:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0DE]))
        rate = structural_overlap_rate(satellites, drone_views, rng, OVERLAP_TRIPLETS)
        if rate < OVERLAP_THRESHOLD:
            raise NumericalError(
                f"structural self-check failed: same-identity views won only "
                f"{rate:.2%} of triplets (need >= {OVERLAP_THRESHOLD:.0%})")
    return root


def _block_means(img: np.ndarray, grid: int = 4) -> np.ndarray:
    """Color means over a grid x grid tiling; the scale at which views of one
    scene still overlap despite residual rotation/zoom differences."""
    h, w, c = img.shape
    f = h // grid
    return img[:grid * f, :grid * f].astype(np.float64).reshape(
        grid, f, grid, f, c).mean(axis=(1, 3))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    x = _block_means(a).ravel()
    y = _block_means(b).ravel()
    x -= x.mean()
    y -= y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / denom) if denom > 0 else 0.0


def _aligned_ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Best coarse-structure correlation over eight rotations of a."""
    size = a.shape[0]
    best = -1.0
    for k in range(8):
        rot = np.clip(np.rint(_affine_sample(a, size, k * np.pi / 4, 1.0, (0.0, 0.0))),
                      0, 255).astype(np.uint8)
        best = max(best, _ncc(rot, b))
    return best


def structural_overlap_rate(satellites: dict[int, np.ndarray],
                            drone_views: dict[int, list],
                            rng: np.random.Generator, n_triplets: int) -> float:
    """Fraction of triplets where a drone view is better aligned with its own
    identity's satellite view than with another identity's; this is the
    cross-view matching the retrieval task must solve, so a high rate
    certifies the dataset is solvable."""
    ids = sorted(drone_views)
    wins = 0
    for _ in range(n_triplets):
        a_id, n_id = rng.choice(ids, size=2, replace=False)
        anchor = drone_views[a_id][rng.integers(len(drone_views[a_id]))]
        if _aligned_ncc(anchor, satellites[a_id]) > _aligned_ncc(anchor, satellites[n_id]):
            wins += 1
    return wins / n_triplets


# ---------------------------------------------------------------------------
# loading


class SyntheticDataset:
    """Read-only handle over a generated tree; images are cached on first use."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.tsv"
        if not manifest.is_file():
            raise DataIOError(f"{self.root} does not contain manifest.tsv")
        self.ids: dict[str, list[int]] = {split: [] for split in SPLITS}
        for line in manifest.read_text(encoding="ascii").splitlines():
            gid, _, split = line.partition("\t")
            if split not in SPLITS:
                raise DataIOError(f"manifest lists unknown split {split!r}")
            self.ids[split].append(int(gid))
        self._cache: dict[Path, np.ndarray] = {}
        first = self.satellite_image("train", self.ids["train"][0])
        self.image_size = first.shape[0]
        drone_dir = self.root / "train" / "drone" / f"{self.ids['train'][0]:04d}"
        self.views_per_id = len(list(drone_dir.glob("*.ppm")))

    @property
    def train_ids(self):
        return self.ids["train"]

    @property
    def test_ids(self):
        return self.ids["test"]

    @property
    def distractor_ids(self):
        return self.ids["distractor"]

    def _load(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = read_ppm(path)
        return self._cache[path]

    def satellite_image(self, split: str, gid: int) -> np.ndarray:
        return self._load(self.root / split / "satellite" / f"{gid:04d}" / "0.ppm")

    def drone_image(self, split: str, gid: int, view: int) -> np.ndarray:
        return self._load(self.root / split / "drone" / f"{gid:04d}" / f"{view}.ppm")


def _image_key(gid: int, view: int) -> int:
    return gid * 4096 + view


def pick_styles(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform choice among the ten drone conditions, stratified per batch:
    styles are drawn without replacement (cycling when n > 10) so every
    batch covers a balanced style mix. The per-sample marginal stays
    uniform; batch normalization statistics stay stable across steps."""
    picks = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        take = min(10, n - filled)
        picks[filled:filled + take] = rng.permutation(10)[:take]
        filled += take
    return picks


def _crop_flip(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    padded = np.pad(img, ((CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD), (0, 0)), mode="reflect")
    y0 = int(rng.integers(0, 2 * CROP_PAD + 1))
    x0 = int(rng.integers(0, 2 * CROP_PAD + 1))
    out = padded[y0:y0 + size, x0:x0 + size]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def load_training_batch(dataset: SyntheticDataset, n: int, epoch: int, step: int,
                        seed: int) -> Batch:
    """N satellite samples (crop/flip) plus N drone samples (random style of
    the ten, then crop/flip); deterministic given (seed, epoch, step)."""
    train = dataset.train_ids
    if n > len(train):
        raise UsageError(f"batch of {n} per platform exceeds {len(train)} train identities")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, step]))

    sat_ids = rng.choice(train, size=n, replace=False)
    pool = len(train) * dataset.views_per_id
    drone_slots = rng.choice(pool, size=n, replace=False)
    style_picks = pick_styles(rng, n)

    images, identities, style_labels = [], [], []
    for gid in sat_ids:
        img = _crop_flip(dataset.satellite_image("train", int(gid)), rng)
        images.append(img)
        identities.append(int(gid))
        style_labels.append(W.style_label(W.Platform.SATELLITE, W.StyleKind.NORMAL))
    for slot, pick in zip(drone_slots, style_picks):
        gid = train[int(slot) // dataset.views_per_id]
        view = int(slot) % dataset.views_per_id
        style = W.StyleKind(int(pick))
        stream = W.styling_stream(seed, _image_key(gid, view), epoch, style)
        img = W.apply_style(dataset.drone_image("train", gid, view), style, stream)
        images.append(_crop_flip(img, rng))
        identities.append(gid)
        style_labels.append(W.style_label(W.Platform.DRONE, style))

    return Batch(
        images=Tensor(normalize_images(np.stack(images))),
        identity_labels=np.asarray(identities, dtype=np.int64),
        style_labels=np.asarray(style_labels, dtype=np.int64),
    )


def _styled_eval_image(dataset: SyntheticDataset, gid: int, view: int, condition) -> np.ndarray:
    img = dataset.drone_image("test", gid, view)
    if condition == W.UNSEEN_COMPOSITE:
        stream = W.styling_stream(W.DEFAULT_SEED, _image_key(gid, view), 0, _COMPOSITE_STREAM_KEY)
        return W.unseen_composite(img, stream)
    stream = W.styling_stream(W.DEFAULT_SEED, _image_key(gid, view), 0, condition)
    return W.apply_style(img, condition, stream)


def load_eval_set(dataset: SyntheticDataset, condition, task: Task) -> EvalSet:
    """Frozen-styling evaluation pairs for one condition and task.

    condition is a StyleKind or the evaluation-only fog+rain+snow token.
    Drone->Sat: styled test drones query unstyled satellites (+ distractors).
    Sat->Drone: unstyled test satellites query styled test drones.
    """
    if condition != W.UNSEEN_COMPOSITE and not isinstance(condition, W.StyleKind):
        raise UsageError(f"unknown evaluation condition {condition!r}")
    drones, drone_ids = [], []
    for gid in dataset.test_ids:
        for view in range(dataset.views_per_id):
            drones.append(_styled_eval_image(dataset, gid, view, condition))
            drone_ids.append(gid)
    sats, sat_ids = [], []
    for gid in dataset.test_ids:
        sats.append(dataset.satellite_image("test", gid))
        sat_ids.append(gid)

    if task is Task.DRONE_TO_SAT:
        for gid in dataset.distractor_ids:
            sats.append(dataset.satellite_image("distractor", gid))
            sat_ids.append(gid)
        return EvalSet(np.stack(drones), np.asarray(drone_ids),
                       np.stack(sats), np.asarray(sat_ids))
    return EvalSet(np.stack(sats), np.asarray(sat_ids),
                   np.stack(drones), np.asarray(drone_ids))
