"""Dataset construction: axial slice bands, in-brain patches, similar patch
pairs across subjects, and balanced bootstrap control splits.

All sampling is a pure function of (inputs, seed).  Patch eligibility erodes
the brain mask in-plane only (patches are 2-D), so a patch footprint never
leaves the mask or the volume bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from .volume import BrainMask, SubjectMeta, Volume, VolumeError

DEFAULT_SLICE_COUNT = 40
DEFAULT_PATCH_SIZE = 15
DEFAULT_PATCHES_PER_SUBJECT = 15_000


class SamplingError(VolumeError):
    """Invalid sampling request (band too deep, no eligible center, ...)."""


class BalanceError(SamplingError):
    """Bootstrap split constraints could not be met."""


@dataclass(frozen=True, eq=False)
class SliceSample:
    subject_id: str
    slice_index: int
    pixels: np.ndarray  # (channels, height, width) float32


@dataclass(frozen=True, eq=False)
class PatchSample:
    subject_id: str
    center: tuple[int, int, int]  # (z, y, x)
    pixels: np.ndarray  # (channels, patch, patch) float32


@dataclass(frozen=True, eq=False)
class PatchPair:
    """Two patches at the same location from different subjects."""

    left: PatchSample
    right: PatchSample

    def __post_init__(self) -> None:
        if self.left.center != self.right.center:
            raise SamplingError(
                f"pair centers differ: {self.left.center} vs {self.right.center}"
            )
        if self.left.subject_id == self.right.subject_id:
            raise SamplingError(f"pair drawn twice from subject {self.left.subject_id}")


@dataclass(frozen=True)
class BalanceReport:
    train_mean_age: float
    test_mean_age: float
    train_female_fraction: float
    test_female_fraction: float


@dataclass(frozen=True)
class SplitPlan:
    sample_index: int  # 1-based
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    balance: BalanceReport


def slice_band(depth: int, count: int) -> range:
    """Indices of `count` contiguous axial slices centered on depth/2."""
    if count < 1 or count > depth:
        raise SamplingError(f"slice count {count} outside [1, depth={depth}]")
    start = (depth - count) // 2
    return range(start, start + count)


def extract_axial_slices(volume: Volume, count: int = DEFAULT_SLICE_COUNT) -> list[SliceSample]:
    """The `count` central axial slices, ascending z."""
    band = slice_band(volume.dims[0], count)
    return [
        SliceSample(subject_id=volume.subject_id, slice_index=z, pixels=volume.data[:, z])
        for z in band
    ]


def eligible_patch_centers(mask: BrainMask, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Mask eroded in-plane by the patch footprint; centers where a patch fits."""
    if patch_size % 2 != 1:
        raise SamplingError(f"patch size must be odd, got {patch_size}")
    structure = np.ones((1, patch_size, patch_size), dtype=bool)
    return binary_erosion(mask.mask, structure=structure)


def patch_at(volume: Volume, center: tuple[int, int, int], patch_size: int) -> PatchSample:
    """Slice one (C, patch, patch) patch out of the volume; bounds-checked."""
    z, y, x = center
    half = patch_size // 2
    d, h, w = volume.dims
    if not (0 <= z < d and half <= y < h - half and half <= x < w - half):
        raise SamplingError(f"patch at {center} leaves the bounds of {volume.dims}")
    pixels = volume.data[:, z, y - half : y + half + 1, x - half : x + half + 1].copy()
    return PatchSample(subject_id=volume.subject_id, center=(int(z), int(y), int(x)), pixels=pixels)


def extract_patches(
    volume: Volume,
    mask: BrainMask,
    count: int,
    patch_size: int = DEFAULT_PATCH_SIZE,
    seed: int = 0,
) -> list[PatchSample]:
    """Uniformly sample patch centers from the eligible region.

    Sampling is without replacement while count <= number of eligible centers,
    with replacement otherwise.
    """
    eligible = eligible_patch_centers(mask, patch_size)
    centers = np.argwhere(eligible)
    if len(centers) == 0:
        raise SamplingError(
            f"no eligible patch center in subject {volume.subject_id} "
            f"(mask too thin for patch size {patch_size})"
        )
    rng = np.random.default_rng(seed)
    replace = count > len(centers)
    chosen = rng.choice(len(centers), size=count, replace=replace)
    return [patch_at(volume, tuple(centers[i]), patch_size) for i in chosen]


def build_similar_pairs(
    patches_by_subject: Mapping[str, Sequence[PatchSample]],
    volumes: Mapping[str, Volume],
    seed: int = 0,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> list[PatchPair]:
    """Pair every sampled patch with a same-center patch from another subject.

    The partner subject is drawn uniformly among the other subjects in
    `volumes` and its patch is extracted on demand, so only the left-side
    patches need to have been sampled.  Pair count equals the total input
    patch count.
    """
    pool = sorted(volumes)
    if len(pool) < 2:
        raise SamplingError("similar pairs need at least two subjects")
    rng = np.random.default_rng(seed)
    pairs: list[PatchPair] = []
    for sid in sorted(patches_by_subject):
        others = [s for s in pool if s != sid]
        for patch in patches_by_subject[sid]:
            partner = others[rng.integers(len(others))]
            right = patch_at(volumes[partner], patch.center, patch_size)
            pairs.append(PatchPair(left=patch, right=right))
    return pairs


def _balance(metas: Sequence[SubjectMeta]) -> tuple[float, float]:
    ages = [m.age for m in metas]
    females = sum(1 for m in metas if m.sex == "F")
    return float(np.mean(ages)), females / len(metas)


def bootstrap_split(
    metas: Sequence[SubjectMeta],
    n_samples: int = 10,
    n_train: int = 41,
    n_test: int = 15,
    seed: int = 0,
    age_tolerance: float = 2.0,
    female_range: tuple[float, float] = (0.30, 0.50),
    max_attempts: int = 10_000,
) -> list[SplitPlan]:
    """Balanced random partitions of the control pool into train/test.

    A candidate partition is accepted when the train/test mean ages differ by
    at most `age_tolerance` years and each side's female fraction falls in
    `female_range`.  Rejection sampling retries up to `max_attempts` times per
    split before raising.
    """
    if any(m.cohort != "control" for m in metas):
        raise SamplingError("bootstrap splits are drawn from controls only")
    if len(metas) != n_train + n_test:
        raise SamplingError(
            f"control pool has {len(metas)} subjects, expected n_train + n_test = "
            f"{n_train + n_test}"
        )
    rng = np.random.default_rng(seed)
    metas = list(metas)
    plans: list[SplitPlan] = []
    for sample_index in range(1, n_samples + 1):
        for _ in range(max_attempts):
            order = rng.permutation(len(metas))
            train = [metas[i] for i in order[:n_train]]
            test = [metas[i] for i in order[n_train:]]
            train_age, train_f = _balance(train)
            test_age, test_f = _balance(test)
            lo, hi = female_range
            if abs(train_age - test_age) <= age_tolerance and (
                lo <= train_f <= hi and lo <= test_f <= hi
            ):
                plans.append(
                    SplitPlan(
                        sample_index=sample_index,
                        train_ids=tuple(m.subject_id for m in train),
                        test_ids=tuple(m.subject_id for m in test),
                        balance=BalanceReport(train_age, test_age, train_f, test_f),
                    )
                )
                break
        else:
            raise BalanceError(
                f"split {sample_index}: no balanced partition within {max_attempts} attempts "
                f"(age tolerance {age_tolerance}, female range {female_range})"
            )
    return plans
