"""Volume container, synthetic phantoms, slice/pose extraction and motion simulation.

Volumes are dense [Z, Y, X] grids of float32 intensities in [0, 1]. The file
format is a raw little-endian float32 blob (`.vol`, z-major) next to a JSON
sidecar carrying shape, spacing and ordering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class VolumeIOError(ValueError):
    """Malformed sidecar or raw blob."""


@dataclass
class Volume:
    data: np.ndarray  # [Z, Y, X], float32, values in [0, 1]
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def validate(self) -> "Volume":
        if not np.isfinite(self.data).all():
            raise ValueError(f"volume {self.subject_id!r} contains non-finite intensities")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"volume {self.subject_id!r} intensities outside [0, 1]: min={lo:.4g} max={hi:.4g}"
            )
        return self


@dataclass
class SlicePose:
    """One axial slice with its one-hot pose of length K."""

    image: np.ndarray  # [H, W] in [0, 1]
    pose: np.ndarray  # one-hot [K]
    index: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.pose = np.asarray(self.pose, dtype=np.float32)


@dataclass
class SequenceSample:
    """M slice/pose pairs from one subject; the last entry is the query."""

    entries: list
    subject_id: str = ""

    @property
    def contexts(self) -> list:
        return self.entries[:-1]

    @property
    def query(self) -> SlicePose:
        return self.entries[-1]

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Deterministic recipe for a desk-scale test-pattern volume.

    The outer boundary is an elliptic cross-section held constant along z
    (so a structure-free phantom differs between slices only through the
    axial gradient), with nested 3-D ellipsoids inside and a monotone axial
    intensity ramp. Identical specs produce bit-identical volumes.
    """

    seed: int = 0
    shape: tuple = (32, 32, 32)
    outer_radius: tuple = (0.32, 0.44)  # fraction of the in-plane extent
    shell_intensity: tuple = (0.70, 0.95)
    interior_intensity: tuple = (0.25, 0.55)
    inner_count: tuple = (2, 4)  # inclusive range
    inner_radius: tuple = (0.10, 0.24)  # in-plane, fraction of the extent
    inner_radius_z: tuple = (0.05, 0.14)  # axial; kept short so slices carry distinct content
    inner_intensity: tuple = (0.35, 0.95)
    gradient: tuple = (0.55, 1.0)  # axial multiplier endpoints are drawn from here
    subject_id: str = "phantom"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        for name in ("outer_radius", "inner_radius", "inner_radius_z"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is degenerate")
        if self.outer_radius[1] > 0.5:
            raise ValueError("outer_radius must stay below half the in-plane extent")
        if self.inner_count[0] < 0 or self.inner_count[1] < self.inner_count[0]:
            raise ValueError("inner_count range is degenerate")

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("shape", "outer_radius", "shell_intensity", "interior_intensity",
                    "inner_count", "inner_radius", "inner_radius_z", "inner_intensity",
                    "gradient"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic volume: elliptic shell, nested ellipsoids, axial ramp."""
    rng = np.random.default_rng(spec.seed)
    nz, ny, nx = spec.shape
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0

    ry = ny * rng.uniform(*spec.outer_radius)
    rx = nx * rng.uniform(*spec.outer_radius)
    yy = np.arange(ny)[:, None]
    xx = np.arange(nx)[None, :]
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    outer = r2 <= 1.0
    shell = (r2 > 0.72) & outer

    shell_val = rng.uniform(*spec.shell_intensity)
    interior_val = rng.uniform(*spec.interior_intensity)
    base = np.where(shell, shell_val, interior_val) * outer
    vol = np.repeat(base[None, :, :], nz, axis=0)

    n_inner = int(rng.integers(spec.inner_count[0], spec.inner_count[1] + 1))
    zz = np.arange(nz)[:, None, None]
    for _ in range(n_inner):
        cz_i = rng.uniform(0.2, 0.8) * nz
        cy_i = cy + rng.uniform(-0.5, 0.5) * ry
        cx_i = cx + rng.uniform(-0.5, 0.5) * rx
        rz_i = max(nz * rng.uniform(*spec.inner_radius_z), 0.75)
        ry_i = ny * rng.uniform(*spec.inner_radius)
        rx_i = nx * rng.uniform(*spec.inner_radius)
        val = rng.uniform(*spec.inner_intensity)
        d2 = (
            ((zz - cz_i) / rz_i) ** 2
            + ((yy - cy_i) / ry_i) ** 2
            + ((xx - cx_i) / rx_i) ** 2
        )
        vol = np.where((d2 <= 1.0) & outer, val, vol)

    g0, g1 = rng.uniform(*spec.gradient, size=2)
    ramp = np.linspace(g0, g1, nz)
    vol = vol * ramp[:, None, None]
    vol = np.clip(vol, 0.0, 1.0)
    return Volume(vol.astype(np.float32), subject_id=spec.subject_id)


# ---------------------------------------------------------------------------
# slice extraction and sequences
# ---------------------------------------------------------------------------


def extract_slices(vol: Volume, middle_fraction: float = 0.75, K: int | None = None) -> list:
    """K evenly spaced axial slices from the centered slab, with one-hot poses."""
    if not 0.0 < middle_fraction <= 1.0:
        raise ValueError(f"middle_fraction must be in (0, 1], got {middle_fraction}")
    nz = vol.data.shape[0]
    slab = int(round(nz * middle_fraction))
    slab = max(slab, 1)
    if K is None:
        K = slab
    if K > slab:
        raise ValueError(f"K={K} exceeds slab thickness {slab} (Z={nz}, fraction={middle_fraction})")
    start = (nz - slab) // 2
    rel = np.round(np.linspace(0, slab - 1, K)).astype(int) if K > 1 else np.array([(slab - 1) // 2])
    eye = np.eye(K, dtype=np.float32)
    return [
        SlicePose(image=vol.data[start + r], pose=eye[k], index=k)
        for k, r in enumerate(rel)
    ]


def downsample(image: np.ndarray, target_size) -> np.ndarray:
    """Area-average when the ratio is integer, bilinear otherwise; output stays in [0, 1]."""
    image = np.asarray(image)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else tuple(target_size)
    h, w = image.shape
    if th > h or tw > w:
        raise ValueError(f"target {th}x{tw} exceeds source {h}x{w}")
    if (th, tw) == (h, w):
        return image.astype(np.float32, copy=True)
    if h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        out = image.reshape(th, fh, tw, fw).mean(axis=(1, 3))
        return out.astype(np.float32)
    # bilinear with aligned pixel centers
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    img = image.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(np.float32)


def sample_training_sequence(source, M: int, rng: np.random.Generator,
                             middle_fraction: float = 0.75, K: int | None = None) -> SequenceSample:
    """M distinct slice/pose pairs drawn uniformly without replacement.

    ``source`` is either a Volume (sliced here with the given protocol) or a
    pre-extracted slice stack.
    """
    if isinstance(source, Volume):
        stack = extract_slices(source, middle_fraction=middle_fraction, K=K)
        subject = source.subject_id
    else:
        stack = list(source)
        subject = ""
    k_total = len(stack)
    if M > k_total:
        raise ValueError(f"M={M} exceeds the {k_total} available slices")
    picks = rng.choice(k_total, size=M, replace=False)
    return SequenceSample(entries=[stack[i] for i in picks], subject_id=subject)


# context schedules published for the clinical protocols; everything else
# falls back to bin centers floor((i + 0.5) * K / n)
_PUBLISHED_SCHEDULES = {
    (1, 80): [40],
    (3, 80): [20, 40, 60],
    (4, 80): [10, 30, 50, 70],
    (7, 80): [10, 20, 30, 40, 50, 60, 70],
    (1, 100): [50],
    (3, 100): [25, 50, 75],
    (5, 100): [10, 30, 50, 70, 90],
    (9, 100): [10, 20, 30, 40, 50, 60, 70, 80, 90],
    (1, 120): [60],
    (3, 120): [40, 60, 80],
    (5, 120): [20, 40, 60, 80, 100],
    (9, 120): [20, 30, 40, 50, 60, 70, 80, 90, 100],
}


def select_context_schedule(n_contexts: int, K: int) -> list:
    """Evenly spread context slice indices; strictly increasing, within [0, K)."""
    if n_contexts < 0 or n_contexts > K:
        raise ValueError(f"n_contexts={n_contexts} outside [0, {K}]")
    if n_contexts == 0:
        return []
    published = _PUBLISHED_SCHEDULES.get((n_contexts, K))
    if published is not None:
        return list(published)
    return [int(np.floor((i + 0.5) * K / n_contexts)) for i in range(n_contexts)]


# ---------------------------------------------------------------------------
# motion corruption
# ---------------------------------------------------------------------------


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill; content leaving the field of view is lost."""
    h, w = img.shape
    out = np.zeros_like(img)
    ys_src = slice(max(0, -dy), min(h, h - dy))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[ys_dst, xs_dst] = img[ys_src, xs_src]
    return out


def motion_corrupt_stacks(vol: Volume, n_stacks: int, max_translation_voxels: int,
                          rng: np.random.Generator, blur_sigma: float = 1.0):
    """Re-slice along alternating orthogonal axes with per-slice random shifts.

    Returns (corrupted stack volumes, their Gaussian-blurred voxel average).
    Shifts are integer translations uniform in [-max, +max] per in-plane axis.
    """
    if n_stacks < 1:
        raise ValueError("n_stacks must be >= 1")
    shape = vol.data.shape
    mt = int(max_translation_voxels)
    for axis in range(min(3, n_stacks)):
        inplane = [s for i, s in enumerate(shape) if i != axis]
        if mt >= min(inplane):
            raise ValueError(
                f"translation {mt} exceeds the in-plane extent {min(inplane)} of axis-{axis} slices"
            )

    stacks = []
    for s in range(n_stacks):
        axis = s % 3
        moved = np.moveaxis(vol.data.copy(), axis, 0)
        for i in range(moved.shape[0]):
            dy, dx = rng.integers(-mt, mt + 1, size=2)
            if dy or dx:
                moved[i] = _shift2d(moved[i], int(dy), int(dx))
        stacks.append(
            Volume(np.moveaxis(moved, 0, axis), spacing_mm=vol.spacing_mm,
                   subject_id=f"{vol.subject_id}-stack{s}")
        )

    avg = np.mean([s.data for s in stacks], axis=0)
    blurred = ndimage.gaussian_filter(avg, sigma=blur_sigma, mode="reflect")
    blurred = np.clip(blurred, 0.0, 1.0).astype(np.float32)
    average = Volume(blurred, spacing_mm=vol.spacing_mm, subject_id=f"{vol.subject_id}-motionavg")
    return stacks, average


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _vol_paths(path) -> tuple:
    p = Path(path)
    if p.suffix == ".vol":
        p = p.with_suffix("")
    return p.with_suffix(".vol"), p.with_suffix(".json")


def save_volume(vol: Volume, path) -> None:
    raw_path, meta_path = _vol_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(vol.data.shape),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": "f32le",
        "order": "zyx",
        "subject_id": vol.subject_id,
    }
    raw_path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    meta_path.write_text(json.dumps(meta, indent=1))


def load_volume(path, normalize: bool = False) -> Volume:
    raw_path, meta_path = _vol_paths(path)
    if not meta_path.exists():
        raise VolumeIOError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"malformed sidecar {meta_path}: {exc}") from exc
    for key in ("shape", "dtype", "order"):
        if key not in meta:
            raise VolumeIOError(f"sidecar {meta_path} lacks required key {key!r}")
    if meta["dtype"] != "f32le" or meta["order"] != "zyx":
        raise VolumeIOError(f"unsupported encoding {meta['dtype']}/{meta['order']}")
    shape = tuple(int(s) for s in meta["shape"])
    blob = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise VolumeIOError(f"{raw_path}: expected {expected} bytes for shape {shape}, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4").reshape(shape)
    vol = Volume(
        data.copy(),
        spacing_mm=tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0))),
        subject_id=str(meta.get("subject_id", "")),
    )
    if normalize:
        lo, hi = float(vol.data.min()), float(vol.data.max())
        if hi > lo:
            vol.data = ((vol.data - lo) / (hi - lo)).astype(np.float32)
    return vol.validate()


def load_volume_dir(path) -> list:
    """All .vol volumes under a directory, ordered by file name."""
    root = Path(path)
    if not root.is_dir():
        raise VolumeIOError(f"{root} is not a directory")
    vols = [load_volume(p) for p in sorted(root.glob("*.vol"))]
    if not vols:
        raise VolumeIOError(f"no .vol files in {root}")
    return vols


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM for quick visual inspection."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
