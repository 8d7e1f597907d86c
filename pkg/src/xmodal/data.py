"""Synthetic moving-shape clips, their container format, and batch sampling.

A clip is a short sequence of RGB frames showing one textured-background
scene with one colored shape translating across it.  The two modality views
of a clip window are:

* rgb: the temporally centered frame of a 5-frame window, 3 x H x W in [0, 1]
* sod: the 4 grayscale successive differences of that window, 4 x H x W in
  [-1, 1] (static background cancels exactly in the differences)

Determinism notes: frames are quantized to a 1/4096 grid before the float32
store and trajectories live on a 1/4 pixel grid, so background cancellation
and temporal reversal identities hold bitwise, not just to rounding error.
Grayscale means are computed as (channel-sum difference) / 3 so the
background term cancels before any division.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, GenerationError, SamplingError

MAGIC = b"XMSD"
FORMAT_VERSION = 1
RGB_CHANNELS = 3
SOD_CHANNELS = 4
SOD_WINDOW = 5  # frames per window; SOD_CHANNELS successive differences
_QUANT = 4096.0

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "bar")
# (dx, dy) unit steps; the first four are the default motion classes
DIRECTIONS = (
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (-1, 1), (1, -1), (-1, -1),
)


@dataclass(frozen=True)
class ClipGeometry:
    """Knobs of the clip generator; defaults give the standard desk task."""

    height: int = 40
    width: int = 40
    frame_count: int = 12
    shape_classes: int = 4
    motion_classes: int = 4
    # per-step speed draw, px/frame; quarter-pixel multiples keep trajectory
    # arithmetic exact in float64
    speed_choices: tuple = (1.0, 1.25)
    # sizes near the feasibility cap: silhouettes fill most of a crop and the
    # start rectangle shrinks, so identity cannot ride on position alone
    size_range: tuple = (7.5, 9.5)
    rotation_range: float = 0.35  # radians, +- for shapes that can rotate
    background_cells: int = 5
    background_level: float = 0.18
    color_range: tuple = (0.3, 0.65)

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(
                f"frame size must be at least 16x16, got {self.height}x{self.width}"
            )
        if self.frame_count < 6:
            raise ConfigError(f"frame_count must be >= 6, got {self.frame_count}")
        if not 4 <= self.shape_classes <= len(SHAPE_NAMES):
            raise ConfigError(
                f"shape_classes must be in [4, {len(SHAPE_NAMES)}], got "
                f"{self.shape_classes}"
            )
        if not 4 <= self.motion_classes <= len(DIRECTIONS):
            raise ConfigError(
                f"motion_classes must be in [4, {len(DIRECTIONS)}], got "
                f"{self.motion_classes}"
            )
        if len(self.speed_choices) == 0 or any(s < 0 for s in self.speed_choices):
            raise ConfigError(f"speed_choices must be non-negative, got "
                              f"{self.speed_choices}")
        if not 0 < self.background_level < 0.36:
            raise ConfigError(
                f"background_level must sit in (0, 0.36) so frames stay in "
                f"[0, 1], got {self.background_level}"
            )
        lo, hi = self.color_range
        if not 0.0 < lo <= hi <= 0.65:
            raise ConfigError(
                f"color_range must sit in (0, 0.65], got {self.color_range}"
            )


@dataclass
class ClipSpec:
    """Everything needed to render one clip deterministically."""

    clip_id: int
    shape_class: int
    motion_class: int
    shape_color: np.ndarray  # (3,) in color_range
    background_texture_seed: int
    start: np.ndarray  # (2,) center of the shape at frame 0, quarter grid
    velocities: np.ndarray  # (frame_count - 1, 2) px/frame, quarter grid
    frame_count: int
    frame_size: tuple  # (height, width)
    shape_size: float  # half extent in px
    rotation: float
    background_cells: int = 5
    background_level: float = 0.35


@dataclass
class ModalityPair:
    """The two views of one clip window, full-frame, float64."""

    rgb: np.ndarray  # (3, h, w)
    sod: np.ndarray  # (4, h, w)
    clip_id: int
    shape_class: int
    motion_class: int
    center_frame_index: int


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x * _QUANT) / _QUANT


def _shape_mask(shape_class, h, w, pos, size, rotation):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    dx = xs - pos[0]
    dy = ys - pos[1]
    c, s = np.cos(rotation), np.sin(rotation)
    xr = c * dx + s * dy
    yr = -s * dx + c * dy
    name = SHAPE_NAMES[shape_class]
    if name == "disk":
        sdf = np.hypot(dx, dy) - size
    elif name == "square":
        sdf = np.maximum(np.abs(xr), np.abs(yr)) - 0.9 * size
    elif name == "triangle":
        ri = 0.65 * size
        sdf = None
        for phi in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6):
            d = np.cos(phi) * xr + np.sin(phi) * yr
            sdf = d if sdf is None else np.maximum(sdf, d)
        sdf = sdf - ri
    elif name == "cross":
        arm = 0.38 * size
        r1 = np.maximum(np.abs(xr) - size, np.abs(yr) - arm)
        r2 = np.maximum(np.abs(xr) - arm, np.abs(yr) - size)
        sdf = np.minimum(r1, r2)
    elif name == "ring":
        sdf = np.abs(np.hypot(dx, dy) - 0.8 * size) - 0.35 * size
    elif name == "bar":
        sdf = np.maximum(np.abs(xr) - size, np.abs(yr) - 0.33 * size)
    else:  # pragma: no cover
        raise ConfigError(f"unknown shape class {shape_class}")
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _background(seed: int, h: int, w: int, cells: int, level: float) -> np.ndarray:
    """Static low-frequency color texture in [0, level], (h, w, 3)."""
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.0, level, size=(cells + 1, cells + 1, 3))
    fy = np.linspace(0.0, cells, h)
    fx = np.linspace(0.0, cells, w)
    iy = np.minimum(fy.astype(np.intp), cells - 1)
    ix = np.minimum(fx.astype(np.intp), cells - 1)
    ty = (fy - iy)[:, None, None]
    tx = (fx - ix)[None, :, None]
    g00 = grid[iy][:, ix]
    g01 = grid[iy][:, ix + 1]
    g10 = grid[iy + 1][:, ix]
    g11 = grid[iy + 1][:, ix + 1]
    return (1 - ty) * ((1 - tx) * g00 + tx * g01) + ty * ((1 - tx) * g10 + tx * g11)


def _positions(spec: ClipSpec) -> np.ndarray:
    """(frame_count, 2) shape-center positions; exact on the quarter grid."""
    steps = np.vstack([np.zeros((1, 2)), spec.velocities])
    return spec.start[None, :] + np.cumsum(steps, axis=0)


def render_clip(spec: ClipSpec) -> np.ndarray:
    """Render (frame_count, H, W, 3) float32 frames in [0, 1]."""
    h, w = spec.frame_size
    bg = _quantize(
        _background(
            spec.background_texture_seed,
            h,
            w,
            spec.background_cells,
            spec.background_level,
        )
    )
    pos = _positions(spec)
    margin_violation = (
        pos.min() < 0
        or pos[:, 0].max() > w - 1
        or pos[:, 1].max() > h - 1
    )
    if margin_violation:
        raise GenerationError(
            f"clip {spec.clip_id}: trajectory leaves the frame"
        )
    frames = np.empty((spec.frame_count, h, w, 3), dtype=np.float32)
    color = spec.shape_color.reshape(1, 1, 3)
    for t in range(spec.frame_count):
        mask = _shape_mask(
            spec.shape_class, h, w, pos[t], spec.shape_size, spec.rotation
        )
        frames[t] = bg + _quantize(mask[:, :, None] * color)
    return frames


def make_clip_spec(
    clip_id: int,
    shape_class: int,
    motion_class: int,
    geometry: ClipGeometry,
    rng: np.random.Generator,
) -> ClipSpec:
    """Draw nuisances and a feasible quarter-grid trajectory for one clip."""
    g = geometry
    color = rng.uniform(g.color_range[0], g.color_range[1], size=3)
    texture_seed = int(rng.integers(0, 2**31 - 1))
    size = float(rng.uniform(g.size_range[0], g.size_range[1]))
    rotation = float(rng.uniform(-g.rotation_range, g.rotation_range))
    direction = np.array(DIRECTIONS[motion_class], dtype=np.float64)
    speeds = rng.choice(np.asarray(g.speed_choices, dtype=np.float64),
                        size=g.frame_count - 1)
    velocities = direction[None, :] * speeds[:, None]
    cum = np.vstack([np.zeros((1, 2)), np.cumsum(velocities, axis=0)])
    margin = size + 2.5
    start = np.empty(2)
    for axis, extent in ((0, g.width), (1, g.height)):
        lo = margin - cum[:, axis].min()
        hi = (extent - 1 - margin) - cum[:, axis].max()
        lo_q = np.ceil(lo * 4.0) / 4.0
        slots = int(np.floor((hi - lo_q) * 4.0)) + 1
        if slots <= 0:
            raise GenerationError(
                f"clip {clip_id}: no feasible start position "
                f"(speed/size too large for a {g.height}x{g.width} frame)"
            )
        start[axis] = lo_q + 0.25 * float(rng.integers(0, slots))
    return ClipSpec(
        clip_id=clip_id,
        shape_class=shape_class,
        motion_class=motion_class,
        shape_color=color,
        background_texture_seed=texture_seed,
        start=start,
        velocities=velocities,
        frame_count=g.frame_count,
        frame_size=(g.height, g.width),
        shape_size=size,
        rotation=rotation,
        background_cells=g.background_cells,
        background_level=g.background_level,
    )


class Dataset:
    """In-memory clip collection with per-clip difference caching."""

    def __init__(self, frames, clip_ids, shape_labels, motion_labels,
                 shape_classes, motion_classes):
        self.frames = frames  # (N, F, H, W, 3) float32
        self.clip_ids = np.asarray(clip_ids, dtype=np.uint32)
        self.shape_labels = np.asarray(shape_labels, dtype=np.uint16)
        self.motion_labels = np.asarray(motion_labels, dtype=np.uint16)
        self.shape_classes = int(shape_classes)
        self.motion_classes = int(motion_classes)
        self._diffs = {}
        self._weights = {}
        self._weight_cums = {}

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_count(self):
        return self.frames.shape[1]

    @property
    def frame_size(self):
        return self.frames.shape[2], self.frames.shape[3]

    def candidate_centers(self):
        lo = SOD_WINDOW // 2
        return range(lo, self.frame_count - lo)

    def clip_diffs(self, index: int) -> np.ndarray:
        """(F-1, H, W) grayscale frame differences of one clip, float64."""
        cached = self._diffs.get(index)
        if cached is None:
            sums = self.frames[index].astype(np.float64).sum(axis=3)
            cached = (sums[1:] - sums[:-1]) / 3.0
            self._diffs[index] = cached
        return cached

    def window_weights(self, index: int) -> np.ndarray:
        """Mean |sod| of every candidate window, one weight per center."""
        cached = self._weights.get(index)
        if cached is None:
            diffs = self.clip_diffs(index)
            centers = self.candidate_centers()
            k = SOD_CHANNELS
            cached = np.array(
                [np.abs(diffs[c - 2 : c - 2 + k]).mean() for c in centers]
            )
            self._weights[index] = cached
        return cached

    def window_weight_cumsum(self, index: int) -> np.ndarray:
        cached = self._weight_cums.get(index)
        if cached is None:
            cached = np.cumsum(self.window_weights(index))
            self._weight_cums[index] = cached
        return cached

    def pair(self, index: int, center: int) -> ModalityPair:
        centers = self.candidate_centers()
        if center not in centers:
            raise SamplingError(
                f"center {center} outside valid range "
                f"[{centers.start}, {centers.stop - 1}]"
            )
        # views into the stored frames / cached diffs; augmentation copies
        rgb = self.frames[index, center].transpose(2, 0, 1)
        sod = self.clip_diffs(index)[center - 2 : center + 2]
        return ModalityPair(
            rgb=rgb,
            sod=sod,
            clip_id=int(self.clip_ids[index]),
            shape_class=int(self.shape_labels[index]),
            motion_class=int(self.motion_labels[index]),
            center_frame_index=center,
        )

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.frames[indices],
            self.clip_ids[indices],
            self.shape_labels[indices],
            self.motion_labels[indices],
            self.shape_classes,
            self.motion_classes,
        )


def generate_dataset(
    n_clips: int,
    spec_distribution=None,
    seed: int = 0,
    geometry: ClipGeometry | None = None,
) -> Dataset:
    """Render ``n_clips`` labeled clips from one seeded stream.

    ``spec_distribution`` is an optional (S, M) probability table over
    (shape, motion) labels; the default is uniform and independent.
    """
    geometry = geometry or ClipGeometry()
    geometry.validate()
    if n_clips < 2:
        raise ConfigError(f"need >= 2 clips, got {n_clips}")
    s, m = geometry.shape_classes, geometry.motion_classes
    rng = np.random.default_rng(seed)
    if spec_distribution is None:
        shape_labels = rng.integers(0, s, size=n_clips)
        motion_labels = rng.integers(0, m, size=n_clips)
    else:
        dist = np.asarray(spec_distribution, dtype=np.float64)
        if dist.shape != (s, m) or dist.min() < 0:
            raise ConfigError(
                f"spec_distribution must be a non-negative ({s}, {m}) table, "
                f"got shape {dist.shape}"
            )
        total = dist.sum()
        if not total > 0:
            raise ConfigError("spec_distribution sums to zero")
        flat = rng.choice(s * m, size=n_clips, p=(dist / total).reshape(-1))
        shape_labels, motion_labels = np.divmod(flat, m)
    frames = np.empty(
        (n_clips, geometry.frame_count, geometry.height, geometry.width, 3),
        dtype=np.float32,
    )
    for i in range(n_clips):
        spec = make_clip_spec(
            i, int(shape_labels[i]), int(motion_labels[i]), geometry, rng
        )
        frames[i] = render_clip(spec)
    return Dataset(frames, np.arange(n_clips), shape_labels, motion_labels, s, m)


# ---------------------------------------------------------------------------
# container format

_HEADER = struct.Struct("<4sHIHHHHH")
_CLIP_HEAD = struct.Struct("<IHH")


def save_dataset(dataset: Dataset, path):
    h, w = dataset.frame_size
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                len(dataset),
                h,
                w,
                dataset.frame_count,
                dataset.shape_classes,
                dataset.motion_classes,
            )
        )
        for i in range(len(dataset)):
            fh.write(
                _CLIP_HEAD.pack(
                    int(dataset.clip_ids[i]),
                    int(dataset.shape_labels[i]),
                    int(dataset.motion_labels[i]),
                )
            )
            fh.write(dataset.frames[i].astype("<f4", copy=False).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("header", f"file too short ({len(blob)} bytes)")
    magic, version, n, h, w, fc, s, m = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if fc < 6:
        raise FormatError("frame_count", f"must be >= 6, got {fc}")
    if s < 1 or m < 1:
        raise FormatError("class_counts", f"non-positive class counts ({s}, {m})")
    frame_bytes = fc * h * w * 3 * 4
    want = _HEADER.size + n * (_CLIP_HEAD.size + frame_bytes)
    if len(blob) != want:
        raise FormatError(
            "clip_count", f"{n} clips imply {want} bytes, file has {len(blob)}"
        )
    frames = np.empty((n, fc, h, w, 3), dtype=np.float32)
    clip_ids = np.empty(n, dtype=np.uint32)
    shape_labels = np.empty(n, dtype=np.uint16)
    motion_labels = np.empty(n, dtype=np.uint16)
    off = _HEADER.size
    for i in range(n):
        clip_ids[i], shape_labels[i], motion_labels[i] = _CLIP_HEAD.unpack_from(
            blob, off
        )
        off += _CLIP_HEAD.size
        frames[i] = np.frombuffer(
            blob, dtype="<f4", count=fc * h * w * 3, offset=off
        ).reshape(fc, h, w, 3)
        off += frame_bytes
    if shape_labels.size and shape_labels.max() >= s:
        raise FormatError("shape_class", f"label {shape_labels.max()} >= {s}")
    if motion_labels.size and motion_labels.max() >= m:
        raise FormatError("motion_class", f"label {motion_labels.max()} >= {m}")
    return Dataset(frames, clip_ids, shape_labels, motion_labels, s, m)


# ---------------------------------------------------------------------------
# sampling and augmentation

@dataclass
class SamplerConfig:
    tuple_count: int = 30  # tuples per batch; 2x this many clips drawn
    crop_size: int = 32
    magnitude_weighting: bool = True
    random_crop: bool = True
    horizontal_flip: bool = True
    temporal_flip: bool = False
    channel_split: bool = True
    mean_subtract_sod: bool = False
    seed: int = 0


def _pick_center(dataset, index, config, rng) -> int:
    centers = dataset.candidate_centers()
    if config.magnitude_weighting:
        cum = dataset.window_weight_cumsum(index)
        total = cum[-1]
        if total > 0:
            # inverse-cdf draw; one uniform per pick keeps sampling cheap
            pos = int(np.searchsorted(cum, rng.random() * total, side="right"))
            return min(pos, len(cum) - 1) + centers.start
    return int(rng.integers(centers.start, centers.stop))


def sample_tuple_batch(dataset: Dataset, config: SamplerConfig,
                       rng: np.random.Generator):
    """Draw ``tuple_count`` disjoint clip tuples, windows chosen per clip.

    Returns a list of (pair_a, pair_b) of un-augmented full-frame pairs; no
    clip appears twice in one batch.
    """
    b = config.tuple_count
    if b < 1:
        raise ConfigError(f"tuple_count must be >= 1, got {b}")
    if len(dataset) < 2 * b:
        raise SamplingError(
            f"need at least {2 * b} clips for {b} tuples, dataset has "
            f"{len(dataset)}"
        )
    chosen = rng.permutation(len(dataset))[: 2 * b]
    batch = []
    for t in range(b):
        ia, ib = int(chosen[2 * t]), int(chosen[2 * t + 1])
        pa = dataset.pair(ia, _pick_center(dataset, ia, config, rng))
        pb = dataset.pair(ib, _pick_center(dataset, ib, config, rng))
        batch.append((pa, pb))
    return batch


def apply_augment(pair: ModalityPair, config: SamplerConfig, oy: int, ox: int,
                  flip: bool, temporal_flip: bool, channel: int) -> ModalityPair:
    """Deterministic augmentation core; decisions supplied by the caller.

    Order: crop, horizontal flip, temporal flip (sod only), channel split
    (rgb only), scalar mean subtraction (sod only).  Crop offset and flip are
    shared by both modalities.
    """
    cs = config.crop_size
    h, w = pair.rgb.shape[1:]
    if cs > h or cs > w:
        raise ConfigError(f"crop {cs} exceeds frame {h}x{w}")
    if not (0 <= oy <= h - cs and 0 <= ox <= w - cs):
        raise ConfigError(f"crop offset ({oy}, {ox}) out of range")
    rgb = pair.rgb[:, oy : oy + cs, ox : ox + cs]
    sod = pair.sod[:, oy : oy + cs, ox : ox + cs]
    if flip:
        rgb = rgb[:, :, ::-1]
        sod = sod[:, :, ::-1]
    if temporal_flip:
        sod = -sod[::-1]
    if config.channel_split:
        rgb = np.broadcast_to(rgb[channel : channel + 1], rgb.shape)
    rgb = np.ascontiguousarray(rgb)
    sod = np.ascontiguousarray(sod)
    if config.mean_subtract_sod:
        sod = sod - sod.mean()
    return replace(pair, rgb=rgb, sod=sod)


def augment_pair(pair: ModalityPair, config: SamplerConfig,
                 rng: np.random.Generator) -> ModalityPair:
    """Draw augmentation decisions from ``rng`` and apply them."""
    cs = config.crop_size
    h, w = pair.rgb.shape[1:]
    if config.random_crop:
        oy = int(rng.integers(0, h - cs + 1))
        ox = int(rng.integers(0, w - cs + 1))
    else:
        oy, ox = (h - cs) // 2, (w - cs) // 2
    flip = bool(config.horizontal_flip and rng.random() < 0.5)
    tflip = bool(config.temporal_flip and rng.random() < 0.5)
    channel = int(rng.integers(0, RGB_CHANNELS)) if config.channel_split else 0
    return apply_augment(pair, config, oy, ox, flip, tflip, channel)


def eval_config(crop_size: int = 32) -> SamplerConfig:
    """Augmentation-free sampler settings: centered crop, nothing else."""
    return SamplerConfig(
        random_crop=False,
        horizontal_flip=False,
        temporal_flip=False,
        channel_split=False,
        mean_subtract_sod=False,
        magnitude_weighting=False,
        crop_size=crop_size,
    )


def centered_pair(pair: ModalityPair, crop_size: int = 32) -> ModalityPair:
    rng = np.random.default_rng(0)  # never consumed with everything off
    return augment_pair(pair, eval_config(crop_size), rng)
