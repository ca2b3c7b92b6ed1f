"""Voxel-wise reconstruction-error volumes and their control-based thresholding.

The joint error at a voxel is the root of the summed squared per-channel
reconstruction differences.  Slice models cover the central axial band
intersected with the brain mask; patch models cover the in-plane eroded mask
(where a full patch fits), either assigning each voxel the error of its own
centered patch ("center") or averaging all covering patches on a stride grid
("overlap-mean").

The abnormality threshold is an extreme empirical quantile (default 0.98,
linear interpolation between order statistics) of the pooled error values of
all covered voxels of the training controls.  Binarization is strict:
abnormal means error > threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .sampling import eligible_patch_centers, slice_band
from .volume import BrainMask, Volume, VolumeError, load_mvol, save_mvol


class AnomalyError(VolumeError):
    """Invalid error-map or threshold computation."""


@dataclass(frozen=True, eq=False)
class ErrorMap:
    """Per-voxel joint reconstruction error with its coverage region.

    data is zero outside coverage; only covered voxels carry a defined error.
    """

    subject_id: str
    data: np.ndarray  # (D,H,W) float32, >= 0 on coverage
    coverage: np.ndarray  # (D,H,W) bool
    provenance: str

    def __post_init__(self) -> None:
        if self.data.shape != self.coverage.shape:
            raise AnomalyError("error data and coverage shapes differ")
        self.data.flags.writeable = False
        self.coverage.flags.writeable = False


@dataclass(frozen=True)
class AbnormalityThreshold:
    q: float
    value: float
    source: str
    pool_size: int

    def __post_init__(self) -> None:
        if not (0.0 < self.q < 1.0):
            raise AnomalyError(f"quantile level must be in (0, 1), got {self.q}")
        if self.value < 0:
            raise AnomalyError(f"threshold value must be >= 0, got {self.value}")


@dataclass(frozen=True, eq=False)
class BinaryAnomalyMap:
    subject_id: str
    abnormal: np.ndarray  # (D,H,W) bool, True only inside coverage
    coverage: np.ndarray
    threshold: AbnormalityThreshold

    def __post_init__(self) -> None:
        if (self.abnormal & ~self.coverage).any():
            raise AnomalyError("abnormal voxels must lie inside coverage")
        self.abnormal.flags.writeable = False
        self.coverage.flags.writeable = False


def joint_error(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares over the leading channel axis of (x - xhat)."""
    if x.shape != xhat.shape:
        raise AnomalyError(f"channel shapes differ: {x.shape} vs {xhat.shape}")
    diff = x.astype(np.float32) - xhat.astype(np.float32)
    return np.sqrt(np.square(diff).sum(axis=0))


def error_volume_ae(
    model,
    volume: Volume,
    mask: BrainMask,
    band_count: int = 40,
    batch_size: int = 40,
    provenance: str | None = None,
) -> ErrorMap:
    """Joint error over the central axial slice band, masked to the brain.

    `model` must expose reconstruct(batch) and input_hw matching the volume's
    in-plane size.
    """
    d, h, w = volume.dims
    if tuple(model.input_hw) != (h, w):
        raise AnomalyError(
            f"volume slices are {h}x{w} but the checkpoint expects {model.input_hw}"
        )
    band = slice_band(d, band_count)
    data = np.zeros(volume.dims, dtype=np.float32)
    coverage = np.zeros(volume.dims, dtype=bool)
    zs = list(band)
    for start in range(0, len(zs), batch_size):
        chunk = zs[start : start + batch_size]
        batch = np.ascontiguousarray(volume.data[:, chunk].transpose(1, 0, 2, 3))
        recon = model.reconstruct(batch)
        for i, z in enumerate(chunk):
            data[z] = joint_error(batch[i], recon[i])
    for z in zs:
        coverage[z] = mask.mask[z]
    data *= coverage
    return ErrorMap(
        subject_id=volume.subject_id,
        data=data,
        coverage=coverage,
        provenance=provenance or getattr(model, "provenance", "ae:unknown"),
    )


def _gather_patches(volume_windows: np.ndarray, z: int, ys: np.ndarray, xs: np.ndarray):
    # volume_windows: (C, D, H-p+1, W-p+1, p, p) strided view; centers offset by half.
    tiles = volume_windows[:, z, ys, xs]  # (C, n, p, p)
    return np.ascontiguousarray(tiles.transpose(1, 0, 2, 3))


def error_volume_sae(
    model,
    volume: Volume,
    mask: BrainMask,
    aggregate: str = "center",
    stride: int = 1,
    batch_size: int = 512,
    provenance: str | None = None,
) -> ErrorMap:
    """Patch-model error volume.

    center: every eligible voxel gets the joint error of its own centered
    patch reconstruction at the patch center.
    overlap-mean: patches are placed on an in-plane stride grid over eligible
    centers and each voxel averages the joint error of every covering patch.
    """
    if aggregate not in ("center", "overlap-mean"):
        raise AnomalyError(f"unknown aggregation mode {aggregate!r}")
    p = model.patch_size
    half = p // 2
    eligible = eligible_patch_centers(mask, p)
    if not eligible.any():
        raise AnomalyError(f"subject {volume.subject_id}: no voxel admits a {p}x{p} patch")

    windows = sliding_window_view(volume.data, (p, p), axis=(2, 3))
    data = np.zeros(volume.dims, dtype=np.float32)
    fast = hasattr(model, "slice_center_latents") and hasattr(model, "decode_center_values")
    if aggregate == "center":
        coverage = eligible
        for z in range(volume.dims[0]):
            centers = np.argwhere(eligible[z])
            if len(centers) == 0:
                continue
            ys, xs = centers[:, 0], centers[:, 1]
            if fast:
                latents = model.slice_center_latents(volume.data[:, z], centers)
                for start in range(0, len(ys), batch_size):
                    sl = slice(start, start + batch_size)
                    recon_c = model.decode_center_values(latents[sl])  # (n, C)
                    err = joint_error(volume.data[:, z, ys[sl], xs[sl]], recon_c.T)
                    data[z, ys[sl], xs[sl]] = err
                continue
            for start in range(0, len(ys), batch_size):
                sl = slice(start, start + batch_size)
                batch = _gather_patches(windows, z, ys[sl] - half, xs[sl] - half)
                recon = model.reconstruct(batch)
                err = joint_error(
                    batch[:, :, half, half].T, recon[:, :, half, half].T
                )  # (n,)
                data[z, ys[sl], xs[sl]] = err
    else:
        if stride < 1:
            raise AnomalyError(f"stride must be >= 1, got {stride}")
        acc = np.zeros(volume.dims, dtype=np.float64)
        cnt = np.zeros(volume.dims, dtype=np.int32)
        for z in range(volume.dims[0]):
            grid = np.zeros_like(eligible[z])
            grid[half::stride, half::stride] = True
            centers = np.argwhere(eligible[z] & grid)
            if len(centers) == 0:
                continue
            ys, xs = centers[:, 0], centers[:, 1]
            for start in range(0, len(ys), batch_size):
                sl = slice(start, start + batch_size)
                batch = _gather_patches(windows, z, ys[sl] - half, xs[sl] - half)
                recon = model.reconstruct(batch)
                tiles = np.sqrt(np.square(batch - recon).sum(axis=1))  # (n,p,p)
                for t, (y, x) in enumerate(zip(ys[sl], xs[sl])):
                    acc[z, y - half : y + half + 1, x - half : x + half + 1] += tiles[t]
                    cnt[z, y - half : y + half + 1, x - half : x + half + 1] += 1
        coverage = (cnt > 0) & mask.mask
        np.divide(acc, cnt, out=acc, where=cnt > 0)
        data = acc.astype(np.float32)
        data *= coverage
    return ErrorMap(
        subject_id=volume.subject_id,
        data=data,
        coverage=coverage.copy(),
        provenance=provenance or getattr(model, "provenance", "sae:unknown"),
    )


def interpolated_quantile(values: np.ndarray, q: float) -> float:
    """Empirical quantile with linear interpolation between order statistics.

    position = q * (n - 1); the result interpolates the two bracketing sorted
    values.  Computed in float64.
    """
    if not (0.0 < q < 1.0):
        raise AnomalyError(f"quantile level must be in (0, 1), got {q}")
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.size
    if n == 0:
        raise AnomalyError("empty sample for quantile")
    pos = q * (n - 1)
    j = int(math.floor(pos))
    g = pos - j
    if j + 1 >= n:
        return float(v[-1])
    return float(v[j] + g * (v[j + 1] - v[j]))


def abnormality_threshold(
    control_maps: Iterable[ErrorMap], q: float = 0.98
) -> AbnormalityThreshold:
    """Quantile threshold over the pooled covered errors of the control maps."""
    pools = []
    provenance = None
    n_maps = 0
    for emap in control_maps:
        pools.append(emap.data[emap.coverage])
        provenance = provenance or emap.provenance
        n_maps += 1
    if not pools:
        raise AnomalyError("no control error maps supplied")
    pooled = np.concatenate(pools)
    if pooled.size == 0:
        raise AnomalyError("control error pool is empty (no covered voxels)")
    value = interpolated_quantile(pooled, q)
    return AbnormalityThreshold(
        q=q,
        value=value,
        source=f"{provenance}|controls={n_maps}",
        pool_size=int(pooled.size),
    )


def binarize(emap: ErrorMap, threshold: AbnormalityThreshold) -> BinaryAnomalyMap:
    """Strictly-greater thresholding; ties count as normal."""
    abnormal = emap.coverage & (emap.data > threshold.value)
    return BinaryAnomalyMap(
        subject_id=emap.subject_id,
        abnormal=abnormal,
        coverage=emap.coverage.copy(),
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# persistence: 1-channel MVOL with NaN outside coverage, JSON threshold sidecar
# ---------------------------------------------------------------------------


def save_error_map(emap: ErrorMap, path: str | Path) -> None:
    payload = np.where(emap.coverage, emap.data, np.float32(np.nan))[None]
    save_mvol(
        Volume(
            subject_id=emap.subject_id,
            voxel_size_mm=(1.0, 1.0, 1.0),
            data=payload,
            channel_names=(emap.provenance,),
        ),
        path,
    )


def load_error_map(path: str | Path) -> ErrorMap:
    vol = load_mvol(path)
    if vol.channels != 1:
        raise AnomalyError(f"{path}: error maps are stored with one channel")
    raw = vol.data[0]
    coverage = np.isfinite(raw)
    return ErrorMap(
        subject_id=vol.subject_id,
        data=np.where(coverage, raw, 0.0).astype(np.float32),
        coverage=coverage,
        provenance=vol.channel_names[0],
    )


def save_threshold(threshold: AbnormalityThreshold, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "q": threshold.q,
                "value": threshold.value,
                "source": threshold.source,
                "pool_size": threshold.pool_size,
            },
            indent=2,
            sort_keys=True,
        )
    )


def load_threshold(path: str | Path) -> AbnormalityThreshold:
    doc = json.loads(Path(path).read_text())
    return AbnormalityThreshold(
        q=doc["q"], value=doc["value"], source=doc["source"], pool_size=doc["pool_size"]
    )
