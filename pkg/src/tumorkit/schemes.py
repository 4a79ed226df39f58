"""Label schemes, composite regions, and region-size threshold removal.

Two schemes are built in:

* ``glioma-post-treatment`` -- base labels 1=NETC, 2=SNFH, 3=ET, 4=RC,
  with composite regions WT = {1,2,3}, TC = {1,3}, ET = {3}, RC = {4}.
* ``meningioma-rt`` -- a single GTV label (1).

Threshold removal walks the scheme's regions in order (WT, TC, ET, RC);
connected components strictly smaller than the region's threshold are
rewritten to that region's replacement label, chosen so that removing an
inner region never punches a hole in the regions that contain it
(WT->0, TC->2, ET->1, RC->0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .volume import BinaryMask, ComponentSet, LabelVolume, connected_components


@dataclass(frozen=True)
class RegionSpec:
    """A named union of base labels plus the label written into voxels of
    components deleted from it."""

    name: str
    member_labels: frozenset[int]
    removal_replacement: int

    def __post_init__(self):
        if self.removal_replacement in self.member_labels:
            raise ContractError(
                f"region {self.name}: replacement label {self.removal_replacement} "
                f"is a member of the region"
            )


@dataclass(frozen=True)
class LabelScheme:
    """Base-label alphabet plus region definitions.

    ``regions`` is the threshold-processing order; ``report_regions`` is
    the evaluation/report row order.
    """

    name: str
    base_labels: dict[int, str]
    regions: tuple[RegionSpec, ...]
    report_regions: tuple[RegionSpec, ...]

    def __post_init__(self):
        base = set(self.base_labels)
        covered = set()
        for region in self.regions + self.report_regions:
            if not region.member_labels <= base:
                raise ContractError(
                    f"region {region.name} uses labels outside the scheme alphabet"
                )
        for region in self.regions:
            covered |= region.member_labels
        if covered != base:
            raise ContractError(f"scheme {self.name}: some base labels belong to no region")

    @property
    def alphabet(self) -> frozenset[int]:
        return frozenset({0} | set(self.base_labels))

    def region(self, name: str) -> RegionSpec:
        for region in self.regions + self.report_regions:
            if region.name == name:
                return region
        raise ContractError(f"scheme {self.name} has no region named {name!r}")


def _glioma_scheme() -> LabelScheme:
    wt = RegionSpec("WT", frozenset({1, 2, 3}), 0)
    tc = RegionSpec("TC", frozenset({1, 3}), 2)
    et = RegionSpec("ET", frozenset({3}), 1)
    rc = RegionSpec("RC", frozenset({4}), 0)
    netc = RegionSpec("NETC", frozenset({1}), 0)
    snfh = RegionSpec("SNFH", frozenset({2}), 0)
    return LabelScheme(
        name="glioma-post-treatment",
        base_labels={1: "NETC", 2: "SNFH", 3: "ET", 4: "RC"},
        regions=(wt, tc, et, rc),
        report_regions=(et, netc, rc, snfh, tc, wt),
    )


def _meningioma_scheme() -> LabelScheme:
    gtv = RegionSpec("GTV", frozenset({1}), 0)
    return LabelScheme(
        name="meningioma-rt",
        base_labels={1: "GTV"},
        regions=(gtv,),
        report_regions=(gtv,),
    )


GLIOMA_POST_TREATMENT = _glioma_scheme()
MENINGIOMA_RT = _meningioma_scheme()
SCHEMES = {s.name: s for s in (GLIOMA_POST_TREATMENT, MENINGIOMA_RT)}


def scheme_by_name(name: str) -> LabelScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ContractError(f"unknown scheme {name!r}; available: {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per-region minimum component sizes in voxels, ordered as the
    scheme's regions; 0 disables removal for that region."""

    per_region: tuple[int, ...]

    def __post_init__(self):
        per_region = tuple(int(t) for t in self.per_region)
        if any(t < 0 for t in per_region):
            raise ContractError(f"thresholds must be >= 0, got {self.per_region!r}")
        object.__setattr__(self, "per_region", per_region)

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        try:
            return cls(tuple(int(part) for part in text.split(",")))
        except ValueError:
            raise ContractError(f"cannot parse threshold list {text!r}") from None


@dataclass(frozen=True)
class RemovalRecord:
    """One deleted component: which region, how many voxels, where."""

    region: str
    voxel_count: int
    centroid: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "region": self.region,
            "voxel_count": self.voxel_count,
            "centroid": [round(c, 3) for c in self.centroid],
        }


def validate_labels(labels: LabelVolume, scheme: LabelScheme) -> None:
    """Raise if any voxel carries a label outside the scheme alphabet,
    naming the first offending voxel and value."""
    allowed = np.zeros(max(scheme.alphabet) + 1, dtype=bool)
    allowed[list(scheme.alphabet)] = True
    data = labels.data
    bad = (data < 0) | (data > max(scheme.alphabet)) | ~allowed[np.clip(data, 0, max(scheme.alphabet))]
    if bad.any():
        flat = int(np.argmax(bad.ravel()))
        voxel = np.unravel_index(flat, data.shape)
        raise ContractError(
            f"label value {int(data[voxel])} at voxel {tuple(int(v) for v in voxel)} "
            f"is not in scheme {scheme.name!r} (alphabet {sorted(scheme.alphabet)})"
        )


def region_mask(labels: LabelVolume, region: RegionSpec, scheme: LabelScheme | None = None) -> BinaryMask:
    """Boolean mask of voxels whose label belongs to the region."""
    if scheme is not None:
        validate_labels(labels, scheme)
    member = np.isin(labels.data, sorted(region.member_labels))
    return BinaryMask(labels.geometry, member)


def apply_threshold_policy(
    labels: LabelVolume,
    scheme: LabelScheme,
    policy: ThresholdPolicy,
    connectivity: int = 26,
) -> tuple[LabelVolume, list[RemovalRecord]]:
    """Remove small components region by region.

    Regions are processed in the scheme's order, so later regions see the
    effect of earlier removals. A component is removed iff its voxel count
    is strictly below the region's threshold; its voxels are rewritten to
    the region's replacement label. Idempotent, and the all-zero policy is
    the identity.
    """
    if len(policy.per_region) != len(scheme.regions):
        raise ContractError(
            f"policy has {len(policy.per_region)} thresholds but scheme "
            f"{scheme.name!r} has {len(scheme.regions)} regions"
        )
    validate_labels(labels, scheme)
    out = labels.data.copy()
    removals: list[RemovalRecord] = []
    for region, threshold in zip(scheme.regions, policy.per_region):
        if threshold <= 0:
            continue
        current = LabelVolume(labels.geometry, out)
        mask = region_mask(current, region)
        comps = connected_components(mask, connectivity)
        for cid in range(1, comps.n_components + 1):
            size = int(comps.voxel_counts[cid - 1])
            if size >= threshold:
                continue
            where = comps.component_id == cid
            coords = np.argwhere(where)
            out[where] = region.removal_replacement
            removals.append(
                RemovalRecord(region.name, size, tuple(float(c) for c in coords.mean(axis=0)))
            )
    return LabelVolume(labels.geometry, out), removals
