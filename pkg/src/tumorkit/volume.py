"""Geometry-aware volume primitives shared by every pipeline stage.

Holds the core grid types (geometry, intensity/label volumes, binary
masks, connected components) and the operations built on them:
z-score normalisation, Otsu thresholding, head-foreground extraction,
connected-component labeling, binary dilation and an exact anisotropic
Euclidean distance transform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import ContractError, DataError, DegenerateInputWarning

CONNECTIVITIES = (6, 18, 26)

_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITIES:
        raise ContractError(
            f"connectivity must be one of {CONNECTIVITIES}, got {connectivity!r}"
        )
    return ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Grid extents, physical spacing (mm) and voxel-to-world affine."""

    extents: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    affine: np.ndarray  # 4x4 float64, voxel index -> world mm

    def __post_init__(self):
        extents = tuple(int(e) for e in self.extents)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(extents) != 3 or any(e < 1 for e in extents):
            raise ContractError(f"extents must be three positive integers, got {self.extents!r}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ContractError(f"spacing components must be strictly positive, got {self.spacing_mm!r}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ContractError(f"affine must be 4x4, got shape {affine.shape}")
        affine.setflags(write=False)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def isotropic(cls, extents, spacing: float = 1.0) -> "VolumeGeometry":
        affine = np.diag([spacing, spacing, spacing, 1.0])
        return cls(tuple(extents), (spacing,) * 3, affine)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def matches(self, other: "VolumeGeometry") -> bool:
        return (
            self.extents == other.extents
            and np.allclose(self.spacing_mm, other.spacing_mm, rtol=0.0, atol=1e-6)
            and np.allclose(self.affine, other.affine, rtol=0.0, atol=1e-4)
        )


def _check_shape(geometry: VolumeGeometry, data: np.ndarray, what: str) -> None:
    if tuple(data.shape) != geometry.extents:
        raise ContractError(
            f"{what} shape {tuple(data.shape)} does not match geometry extents {geometry.extents}"
        )


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """A 3D scalar grid; one per MRI modality."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        _check_shape(self.geometry, self.data, "intensity volume")


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """A 3D grid of small non-negative integer labels."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        _check_shape(self.geometry, self.data, "label volume")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ContractError(f"label volume requires an integer dtype, got {self.data.dtype}")


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """One boolean per voxel, sharing geometry with its parent volume."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        _check_shape(self.geometry, self.data, "mask")
        if self.data.dtype != np.bool_:
            object.__setattr__(self, "data", self.data.astype(bool))

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Connected components of a binary mask.

    ``component_id`` assigns 0 to background and a dense id in 1..K to
    every foreground voxel; ids are ordered by each component's minimum
    C-order linear voxel index, which makes the labeling independent of
    any internal iteration order.
    """

    geometry: VolumeGeometry
    component_id: np.ndarray
    voxel_counts: np.ndarray
    connectivity: int

    @property
    def n_components(self) -> int:
        return int(self.voxel_counts.shape[0])

    @property
    def volumes_mm3(self) -> np.ndarray:
        return self.voxel_counts * self.geometry.voxel_volume_mm3

    def component_mask(self, component: int) -> np.ndarray:
        if not 1 <= component <= self.n_components:
            raise ContractError(f"component id {component} out of range 1..{self.n_components}")
        return self.component_id == component


def zscore_normalize(volume: IntensityVolume, mask: BinaryMask) -> IntensityVolume:
    """Standardise intensities over ``mask`` voxels, keeping background at 0.

    Uses the population standard deviation. A zero-variance region is
    mapped to all zeros and reported via ``DegenerateInputWarning``.
    """
    if not volume.geometry.matches(mask.geometry):
        raise ContractError("volume and mask geometries differ")
    inside = mask.data
    if not inside.any():
        raise ContractError("z-score normalisation requires a non-empty mask")
    values = volume.data[inside].astype(np.float64)
    mean = values.mean()
    std = values.std()  # population std
    out = np.zeros(volume.geometry.extents, dtype=np.float64)
    if std == 0.0:
        warnings.warn(
            "zero variance inside mask; normalised volume set to 0 everywhere",
            DegenerateInputWarning,
            stacklevel=2,
        )
    else:
        out[inside] = (values - mean) / std
    return IntensityVolume(volume.geometry, out)


def otsu_threshold(volume: IntensityVolume, bins: int = 256) -> float:
    """Histogram threshold maximising between-class variance.

    The histogram spans [min, max] with ``bins`` bins; the returned value
    is the midpoint of the last bin assigned to the lower class. Ties are
    broken toward the lower threshold. Intended use is ``data > t``.
    """
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise DataError("Otsu thresholding requires finite intensities")
    lo = float(data.min())
    hi = float(data.max())
    if lo == hi:
        raise DataError("cannot threshold a constant volume")
    hist, _ = np.histogram(data, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = lo + (np.arange(bins, dtype=np.float64) + 0.5) * (hi - lo) / bins

    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    m0 = np.cumsum(hist * centers)[:-1]
    m_total = float((hist * centers).sum())
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins - 1, dtype=np.float64)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=valid)
    mu1 = np.divide(m_total - m0, w1, out=np.zeros_like(m0), where=valid)
    between[valid] = w0[valid] * w1[valid] * (mu0[valid] - mu1[valid]) ** 2
    cut = int(np.argmax(between))  # argmax returns the first (lowest) maximiser
    return float(centers[cut])


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentSet:
    """Label foreground components under 6/18/26-connectivity.

    Ids are renumbered so that components sort by their minimum C-order
    linear index, making the output deterministic.
    """
    structure = _structure(connectivity)
    raw, n = ndimage.label(mask.data, structure=structure)
    raw = raw.astype(np.int32, copy=False)
    if n == 0:
        return ComponentSet(mask.geometry, raw, np.zeros(0, dtype=np.int64), connectivity)
    flat = raw.ravel()
    values, first_index = np.unique(flat, return_index=True)
    present = values != 0
    order = np.argsort(first_index[present], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[values[present][order]] = np.arange(1, n + 1, dtype=np.int32)
    relabeled = remap[raw]
    counts = np.bincount(relabeled.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentSet(mask.geometry, relabeled, counts, connectivity)


def foreground_mask(volume: IntensityVolume) -> BinaryMask:
    """Extract the head foreground: Otsu threshold, largest 26-connected
    component, then per-axial-slice hole filling."""
    threshold = otsu_threshold(volume)
    rough = volume.data > threshold
    comps = connected_components(BinaryMask(volume.geometry, rough), connectivity=26)
    if comps.n_components == 0:
        raise DataError("no foreground voxels above the Otsu threshold")
    largest = int(np.argmax(comps.voxel_counts)) + 1  # argmax tie -> lowest id
    kept = comps.component_id == largest
    filled = np.empty_like(kept)
    for z in range(kept.shape[2]):
        filled[:, :, z] = ndimage.binary_fill_holes(kept[:, :, z])
    return BinaryMask(volume.geometry, filled)


def dilate(mask: BinaryMask, radius_voxels: int) -> BinaryMask:
    """Chebyshev dilation: voxels within ``radius_voxels`` (L-inf) of the
    foreground. Radius 0 is the identity."""
    if radius_voxels < 0:
        raise ContractError(f"dilation radius must be >= 0, got {radius_voxels}")
    if radius_voxels == 0 or not mask.data.any():
        return BinaryMask(mask.geometry, mask.data.copy())
    grown = ndimage.binary_dilation(
        mask.data, structure=np.ones((3, 3, 3), dtype=bool), iterations=radius_voxels
    )
    return BinaryMask(mask.geometry, grown)


@njit(cache=True)
def _edt_parabola_pass(rows: np.ndarray, s2: float) -> None:
    """One separable pass of the exact lower-envelope distance transform.

    ``rows`` holds squared distances along the scanned axis (one line per
    row, modified in place); ``s2`` is the squared voxel spacing of that
    axis. Background starts at +inf; lines with no finite entry stay +inf.
    """
    nlines, n = rows.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    g = np.empty(n, dtype=np.float64)
    for li in range(nlines):
        f = rows[li]
        k = -1
        for q in range(n):
            fq = f[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            p = v[k]
            s = ((fq + s2 * (q * q)) - (f[p] + s2 * (p * p))) / (2.0 * s2 * (q - p))
            while s <= z[k]:
                k -= 1
                p = v[k]
                s = ((fq + s2 * (q * q)) - (f[p] + s2 * (p * p))) / (2.0 * s2 * (q - p))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                g[q] = np.inf
        else:
            j = 0
            for q in range(n):
                while z[j + 1] < q:
                    j += 1
                p = v[j]
                d = q - p
                g[q] = s2 * (d * d) + f[p]
        for q in range(n):
            f[q] = g[q]


def edt_grid(mask_data: np.ndarray, spacing_mm) -> np.ndarray:
    """Exact anisotropic Euclidean distance (mm) to the nearest foreground
    voxel center, on a bare boolean grid. All-background input yields +inf
    everywhere."""
    mask = np.ascontiguousarray(mask_data, dtype=bool)
    f = np.where(mask, 0.0, np.inf)
    if not mask.any():
        return f
    for axis in range(3):
        s = float(spacing_mm[axis])
        work = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        _edt_parabola_pass(work.reshape(-1, work.shape[-1]), s * s)
        f = np.moveaxis(work, -1, axis)
    return np.sqrt(f)


def euclidean_distance_transform(mask: BinaryMask) -> np.ndarray:
    """Distance-to-foreground transform of a mask, in mm (see ``edt_grid``)."""
    return edt_grid(mask.data, mask.geometry.spacing_mm)
