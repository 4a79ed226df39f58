"""Probability-map ensembling: weighted averaging and argmax decoding.

Probability maps travel as 4D NIfTI volumes with class channels on the
fourth axis (channel k decodes to label k, 0 = background). Members are
streamed one at a time, so memory stays bounded by two volumes plus the
float64 accumulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError, TumorkitError
from .nifti import header_for, read_nifti, write_nifti
from .volume import LabelVolume, VolumeGeometry

SUM_TOLERANCE = 1e-3
VALUE_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-class probabilities over a 3D grid, channels last."""

    geometry: VolumeGeometry
    data: np.ndarray  # (nx, ny, nz, C)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ContractError(f"probability volume must be 4D (x, y, z, class), got {self.data.ndim}D")
        if tuple(self.data.shape[:3]) != self.geometry.extents:
            raise ContractError(
                f"probability volume shape {tuple(self.data.shape[:3])} does not match "
                f"geometry extents {self.geometry.extents}"
            )

    @property
    def n_classes(self) -> int:
        return int(self.data.shape[3])

    def validate(self, source: str = "probability volume") -> None:
        if not np.isfinite(self.data).all():
            raise DataError(f"{source}: probabilities contain non-finite values")
        if self.data.min() < -VALUE_TOLERANCE or self.data.max() > 1 + VALUE_TOLERANCE:
            raise DataError(f"{source}: probabilities outside [0, 1]")
        sums = self.data.sum(axis=3)
        if abs(float(sums.min()) - 1.0) > SUM_TOLERANCE or abs(float(sums.max()) - 1.0) > SUM_TOLERANCE:
            raise DataError(
                f"{source}: per-voxel channel sums outside [1 - {SUM_TOLERANCE}, 1 + {SUM_TOLERANCE}]"
            )


@dataclass(frozen=True)
class EnsembleMember:
    model: str
    fold: int
    path: str

    @property
    def ident(self) -> str:
        return f"{self.model}/fold{self.fold} ({self.path})"


@dataclass(frozen=True)
class EnsembleSpec:
    """Member list with optional non-negative weights (default: all 1)."""

    members: tuple[EnsembleMember, ...]
    weights: tuple[float, ...] | None = None
    output: str | None = None

    def __post_init__(self):
        if not self.members:
            raise ContractError("ensemble spec needs at least one member")
        if self.weights is not None:
            if len(self.weights) != len(self.members):
                raise ContractError(
                    f"{len(self.weights)} weights for {len(self.members)} members"
                )
            if any(w < 0 for w in self.weights):
                raise ContractError("ensemble weights must be >= 0")
            if sum(self.weights) <= 0:
                raise ContractError("ensemble weights must not all be zero")

    def resolved_weights(self) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0,) * len(self.members)
        return tuple(float(w) for w in self.weights)

    @classmethod
    def from_json(cls, path) -> "EnsembleSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON: {e}") from e
        known = {"members", "weights", "output"}
        unknown = set(raw) - known
        if unknown:
            raise ParseError(f"{path}: unknown keys {sorted(unknown)}; expected {sorted(known)}")
        if "members" not in raw:
            raise ParseError(f"{path}: missing 'members'")
        members = []
        for i, entry in enumerate(raw["members"]):
            extra = set(entry) - {"model", "fold", "path"}
            if extra:
                raise ParseError(f"{path}: member {i} has unknown keys {sorted(extra)}")
            if "path" not in entry:
                raise ParseError(f"{path}: member {i} is missing 'path'")
            members.append(
                EnsembleMember(
                    model=str(entry.get("model", f"member{i}")),
                    fold=int(entry.get("fold", 0)),
                    path=str(entry["path"]),
                )
            )
        weights = raw.get("weights")
        return cls(
            members=tuple(members),
            weights=tuple(float(w) for w in weights) if weights is not None else None,
            output=raw.get("output"),
        )


def read_probability(path) -> ProbabilityVolume:
    """Load and validate a 4D float probability map."""
    header, geometry, data = read_nifti(path)
    if data.ndim != 4:
        raise DataError(f"{path}: probability maps must be 4D (x, y, z, class), got {data.ndim}D")
    if data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DataError(f"{path}: probability maps must be float32/float64, got {data.dtype}")
    pv = ProbabilityVolume(geometry, data)
    pv.validate(source=str(path))
    return pv


def write_probability(path, prob: ProbabilityVolume, datatype_code: int = 16) -> None:
    header = header_for(prob.geometry, datatype_code=datatype_code, n_channels=prob.n_classes)
    write_nifti(path, header, prob.geometry, prob.data.astype(header.dtype))


def _check_compatible(reference: ProbabilityVolume, other: ProbabilityVolume, who: str) -> None:
    if not reference.geometry.matches(other.geometry):
        raise ContractError(f"{who}: geometry does not match the first member")
    if reference.n_classes != other.n_classes:
        raise ContractError(
            f"{who}: {other.n_classes} classes, expected {reference.n_classes}"
        )


def average_probabilities(
    members: list[ProbabilityVolume] | tuple[ProbabilityVolume, ...],
    weights=None,
) -> ProbabilityVolume:
    """Voxelwise weighted arithmetic mean, renormalised to sum to 1."""
    if not members:
        raise ContractError("need at least one probability volume")
    if weights is None:
        weights = [1.0] * len(members)
    weights = [float(w) for w in weights]
    if len(weights) != len(members):
        raise ContractError(f"{len(weights)} weights for {len(members)} members")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ContractError("weights must be >= 0 with a positive sum")
    first = members[0]
    acc = np.zeros(first.data.shape, dtype=np.float64)
    for i, (member, w) in enumerate(zip(members, weights)):
        _check_compatible(first, member, f"member {i}")
        if not np.isfinite(member.data).all():
            raise DataError(f"member {i}: probabilities contain NaN/inf")
        acc += w * member.data
    acc /= sum(weights)
    return _renormalized(first.geometry, acc)


def _renormalized(geometry: VolumeGeometry, mean: np.ndarray) -> ProbabilityVolume:
    sums = mean.sum(axis=3, keepdims=True)
    if float(sums.min()) <= 0:
        raise DataError("averaged probabilities sum to zero at some voxel")
    return ProbabilityVolume(geometry, mean / sums)


def labels_from_probabilities(prob: ProbabilityVolume) -> LabelVolume:
    """Argmax decode; ties go to the lowest class index; channel k -> label k."""
    labels = np.argmax(prob.data, axis=3).astype(np.uint8)
    return LabelVolume(prob.geometry, labels)


def run_ensemble(spec: EnsembleSpec) -> LabelVolume:
    """Stream members in spec order, average, and decode to labels."""
    weights = spec.resolved_weights()
    acc: np.ndarray | None = None
    first: ProbabilityVolume | None = None
    for member, w in zip(spec.members, weights):
        try:
            pv = read_probability(member.path)
            if first is None:
                first = pv
                acc = np.zeros(pv.data.shape, dtype=np.float64)
            else:
                _check_compatible(first, pv, "member")
        except TumorkitError as e:
            raise type(e)(f"member {member.ident}: {e}") from e
        except OSError as e:
            raise DataError(f"member {member.ident}: {e}") from e
        acc += w * pv.data
    assert acc is not None and first is not None
    acc /= sum(weights)
    return labels_from_probabilities(_renormalized(first.geometry, acc))
