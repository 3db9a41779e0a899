"""Conditioning on sparse context slices, dense-sweep generation and scoring.

Contexts are folded into the latent process once; queries never mutate the
state, so a conditioned model can sweep every pose and draw any number of
samples. Volumes are scored slice-wise with SSIM (11x11 Gaussian window,
sigma 1.5, reflection padding, C1=(0.01L)^2, C2=(0.03L)^2, L=1) and Pearson
cross-correlation, mirroring the table/curve layout of the evaluation
protocol: per-slice rows, per-volume averages, per-dataset averages.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .process import (
    ProcessState,
    init_state,
    predictive_params,
    sample_predictive,
    update_state,
)
from .training import SequenceModel, volume_to_arrays
from .volumes import (
    SlicePose,
    Volume,
    motion_corrupt_stacks,
    select_context_schedule,
)

GENERATION_MODES = ("sample", "average", "mean-latent")


@dataclass
class ConditionedModel:
    """A trained model plus the process state left by a fixed context set."""

    model: SequenceModel
    params: object  # constrained snapshot
    state: ProcessState
    context_indices: list

    @property
    def pose_count(self) -> int:
        return self.model.config.slices_per_volume


def model_slice_stack(model: SequenceModel, vol: Volume) -> list:
    """The volume's slice stack at model resolution, as SlicePose entries."""
    images, poses = volume_to_arrays(vol, model.config)
    return [SlicePose(image=images[k], pose=poses[k], index=k) for k in range(len(images))]


def condition(model: SequenceModel, contexts) -> ConditionedModel:
    """Fold context slices into a fresh process state; [] yields the prior."""
    params = model.process.snapshot()
    state = init_state(params)
    indices = []
    for sp in contexts:
        z, _ = model.flow.forward(sp.image, sp.pose)
        state = update_state(state, z, params)
        indices.append(int(sp.index))
    if len(set(indices)) < len(indices):
        warnings.warn("duplicate context indices supplied; conditioning on them twice")
    return ConditionedModel(model=model, params=params, state=state, context_indices=indices)


def _one_hot(k: int, K: int) -> np.ndarray:
    pose = np.zeros(K, dtype=np.float32)
    pose[k] = 1.0
    return pose


def generate_slice(cm: ConditionedModel, k: int, n_samples: int = 1, mode: str = "sample",
                   rng: np.random.Generator | None = None, return_stack: bool = False):
    """One slice at pose k; ``average`` takes the pixel mean of the draws,
    ``mean-latent`` decodes the predictive location (a deterministic
    approximation of the infinite-sample mean image)."""
    K = cm.pose_count
    if not 0 <= k < K:
        raise ValueError(f"slice index {k} outside [0, {K})")
    if mode not in GENERATION_MODES:
        raise ValueError(f"mode must be one of {GENERATION_MODES}")
    pose = _one_hot(k, K)

    if mode == "mean-latent":
        loc, _, _ = predictive_params(cm.state, cm.params)
        image = cm.model.flow.inverse(loc.astype(np.float32), pose)
        return (image, image[None].copy()) if return_stack else image

    rng = rng if rng is not None else np.random.default_rng(0)
    draws = sample_predictive(cm.state, cm.params, rng, n_samples=n_samples)
    images = cm.model.flow.inverse_batch(
        draws.astype(np.float32), np.repeat(pose[None], n_samples, axis=0)
    )
    image = images[0] if mode == "sample" else images.mean(axis=0)
    return (image, images) if return_stack else image


def dense_sweep(cm: ConditionedModel, K: int | None = None, n_samples: int = 32,
                mode: str = "average", rng: np.random.Generator | None = None,
                chunk: int = 256) -> Volume:
    """Query every pose 0..K-1 and stack the generated slices into a volume.

    The conditioning state is never updated by queries.
    """
    if K is not None and K != cm.pose_count:
        raise ValueError(f"K={K} does not match the trained pose count {cm.pose_count}")
    K = cm.pose_count
    if mode not in GENERATION_MODES:
        raise ValueError(f"mode must be one of {GENERATION_MODES}")
    h, w = cm.model.config.flow.image_shape
    eye = np.eye(K, dtype=np.float32)

    if mode == "mean-latent":
        loc, _, _ = predictive_params(cm.state, cm.params)
        latents = np.repeat(loc[None].astype(np.float32), K, axis=0)
        poses = eye
        per_pose = 1
    else:
        per_pose = n_samples if mode == "average" else 1
        rng = rng if rng is not None else np.random.default_rng(0)
        draws = sample_predictive(cm.state, cm.params, rng, n_samples=K * per_pose)
        latents = draws.astype(np.float32)
        poses = np.repeat(eye, per_pose, axis=0)

    images = np.empty((latents.shape[0], h, w), dtype=np.float32)
    for lo in range(0, latents.shape[0], chunk):
        hi = min(lo + chunk, latents.shape[0])
        images[lo:hi] = cm.model.flow.inverse_batch(latents[lo:hi], poses[lo:hi])
    stack = images.reshape(K, per_pose, h, w).mean(axis=1)
    return Volume(stack.astype(np.float32), subject_id="generated")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2  # (0.01 * L)^2 with L = 1
SSIM_C2 = (0.03) ** 2


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    offsets = np.arange(-half, half + 1)
    g = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    k2 = np.outer(g, g)
    return k2 / k2.sum()


_KERNEL = _ssim_kernel()


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    smooth = lambda img: ndimage.correlate(img, _KERNEL, mode="reflect")
    mu_a, mu_b = smooth(a), smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local structural similarity; volumes are scored slice-wise."""
    a, b = _as_array(a).astype(np.float64), _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_2d(a, b)
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(a[z], b[z]) for z in range(a.shape[0])]))
    raise ValueError("ssim expects 2-D images or 3-D volumes")


def cross_correlation(a, b) -> float:
    """Pearson correlation of flattened intensities."""
    a, b = _as_array(a).astype(np.float64).ravel(), _as_array(b).astype(np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da @ da) * (db @ db))
    if denom == 0.0:
        raise ValueError("undefined correlation: an input has zero variance")
    return float((da @ db) / denom)


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-slice rows, per-volume averages and per-dataset averages."""

    context_counts: list
    schedules: dict  # n_contexts -> context indices
    slice_rows: list = field(default_factory=list)  # (subject, n, k, ssim, cc)
    volume_rows: list = field(default_factory=list)  # (subject, n, ssim, cc)
    dataset_rows: list = field(default_factory=list)  # (n, ssim, cc)

    HEADER = (
        "# ssim: gaussian window 11x11 sigma 1.5, reflect padding, C1=(0.01)^2 C2=(0.03)^2, L=1\n"
        "# cc: pearson correlation of voxel intensities\n"
        "# rows with k=-1 are per-volume averages\n"
    )

    def write_csv(self, path) -> None:
        lines = [self.HEADER + "subject,n_contexts,k,ssim,cc"]
        for subject, n, k, s, c in self.slice_rows:
            lines.append(f"{subject},{n},{k},{s:.6f},{c:.6f}")
        for subject, n, s, c in self.volume_rows:
            lines.append(f"{subject},{n},-1,{s:.6f},{c:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_summary_csv(self, path) -> None:
        lines = ["n_contexts,mean_ssim,mean_cc"]
        for n, s, c in self.dataset_rows:
            lines.append(f"{n},{s:.6f},{c:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_curve_csvs(self, out_dir) -> list:
        """Per context count: mean per-slice SSIM/CC across subjects."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for n in self.context_counts:
            rows = self.curve(n)
            lines = ["k,mean_ssim,mean_cc"]
            lines += [f"{k},{s:.6f},{c:.6f}" for k, s, c in rows]
            path = out_dir / f"curve_ctx{n}.csv"
            path.write_text("\n".join(lines) + "\n")
            paths.append(path)
        return paths

    def curve(self, n_contexts: int) -> list:
        per_k: dict = {}
        for _, n, k, s, c in self.slice_rows:
            if n == n_contexts:
                per_k.setdefault(k, []).append((s, c))
        return [
            (k, float(np.mean([s for s, _ in vals])), float(np.mean([c for _, c in vals])))
            for k, vals in sorted(per_k.items())
        ]

    def dataset_mean_ssim(self, n_contexts: int) -> float:
        for n, s, _ in self.dataset_rows:
            if n == n_contexts:
                return s
        raise KeyError(n_contexts)


def _evaluate_subject(model, images, subject, n, schedule, n_samples, mode, rng):
    poses = np.eye(images.shape[0], dtype=np.float32)
    contexts = [SlicePose(image=images[k], pose=poses[k], index=k) for k in schedule]
    cm = condition(model, contexts)
    generated = dense_sweep(cm, n_samples=n_samples, mode=mode, rng=rng)
    rows = []
    for k in range(images.shape[0]):
        rows.append(
            (subject, n, k, ssim(generated.data[k], images[k]), cross_correlation(generated.data[k], images[k]))
        )
    vol_row = (
        subject,
        n,
        float(np.mean([r[3] for r in rows])),
        float(np.mean([r[4] for r in rows])),
    )
    return rows, vol_row


def evaluate_dataset(model: SequenceModel, test_volumes, context_counts,
                     n_samples: int = 32, mode: str = "average", seed: int = 0,
                     jobs: int = 1) -> MetricsReport:
    """Condition/sweep/score every subject at every context count.

    Deterministic for a given seed; subjects are independent, so evaluation
    parallelizes over (subject, context count) pairs.
    """
    context_counts = list(context_counts)
    K = model.config.slices_per_volume
    schedules = {n: select_context_schedule(n, K) for n in context_counts}
    subjects = []
    for i, vol in enumerate(test_volumes):
        images, _ = volume_to_arrays(vol, model.config)
        subjects.append((vol.subject_id or f"subject{i}", images))

    tasks = []
    for si, (subject, images) in enumerate(subjects):
        for n in context_counts:
            rng = np.random.default_rng(np.random.SeedSequence((seed, si, n)))
            tasks.append((si, n, subject, images, schedules[n], rng))

    def run(task):
        si, n, subject, images, schedule, rng = task
        return (si, n), _evaluate_subject(model, images, subject, n, schedule, n_samples, mode, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(run, tasks))
    else:
        results = dict(map(run, tasks))

    report = MetricsReport(context_counts=context_counts, schedules=schedules)
    for si in range(len(subjects)):
        for n in context_counts:
            rows, vol_row = results[(si, n)]
            report.slice_rows.extend(rows)
            report.volume_rows.append(vol_row)
    for n in context_counts:
        per_n = [r for r in report.volume_rows if r[1] == n]
        report.dataset_rows.append(
            (n, float(np.mean([r[2] for r in per_n])), float(np.mean([r[3] for r in per_n])))
        )
    return report


# ---------------------------------------------------------------------------
# motion comparison
# ---------------------------------------------------------------------------


@dataclass
class MotionComparison:
    subject: str
    n_contexts: int
    max_translation: int
    ssim_generated: float
    ssim_motion_average: float


def motion_experiment(model: SequenceModel, vol: Volume, max_translation: int,
                      n_contexts: int = 4, n_stacks: int = 3, n_samples: int = 32,
                      mode: str = "average", seed: int = 0) -> MotionComparison:
    """Generated-from-clean-contexts volume vs the blurred average of
    motion-corrupted orthogonal stacks, both scored against the clean slab."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9)))
    images, poses = volume_to_arrays(vol, model.config)
    K = model.config.slices_per_volume

    schedule = select_context_schedule(n_contexts, K)
    contexts = [SlicePose(image=images[k], pose=poses[k], index=k) for k in schedule]
    cm = condition(model, contexts)
    generated = dense_sweep(cm, n_samples=n_samples, mode=mode, rng=rng)
    ssim_generated = ssim(generated.data, images)

    _, blurred = motion_corrupt_stacks(vol, n_stacks, max_translation, rng)
    blurred_slices, _ = volume_to_arrays(blurred, model.config)
    ssim_blurred = ssim(blurred_slices, images)

    return MotionComparison(
        subject=vol.subject_id,
        n_contexts=n_contexts,
        max_translation=int(max_translation),
        ssim_generated=float(ssim_generated),
        ssim_motion_average=float(ssim_blurred),
    )
