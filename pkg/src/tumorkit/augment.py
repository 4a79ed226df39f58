"""Synthetic-lesion insertion for dataset multiplication.

Each output case is the original scan plus one inserted lesion, written
under the id ``<case>-<copy>``. The lesion label patch is either a random
nested blob (randomised superellipsoid with a smooth radial perturbation)
or a real lesion cropped from another case's annotation; intensities come
from a procedural generator (class-conditioned means plus spatially
correlated noise) that can be swapped for a learned generator producing
the same ``LesionPatch`` contract. Placement rejects any site where the
lesion would leave the head mask, touch an existing label, or come closer
than the configured distance to one.

Every (case, copy) job derives its own RNG stream from
(seed, case id, copy index), so results do not depend on scheduling.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError, PlacementError
from .nifti import CODE_BY_DTYPE, read_intensity, read_labels, write_intensity, write_labels
from .schemes import LabelScheme, scheme_by_name, validate_labels
from .volume import BinaryMask, IntensityVolume, LabelVolume, dilate, foreground_mask

MODALITIES_BY_SCHEME = {
    "glioma-post-treatment": ("t1", "t1gd", "t2", "flair"),
    "meningioma-rt": ("t1gd",),
}

HEAD_MASK_SOURCES = ("nonzero", "otsu")

_PATCH_MARGIN = 4


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One case: named modalities plus its label volume, sharing geometry."""

    case_id: str
    modalities: dict[str, IntensityVolume]
    labels: LabelVolume
    scheme: LabelScheme

    def __post_init__(self):
        expected = MODALITIES_BY_SCHEME[self.scheme.name]
        if tuple(self.modalities) != expected:
            raise ContractError(
                f"case {self.case_id}: modalities {tuple(self.modalities)} do not match "
                f"scheme {self.scheme.name!r} (expected {expected})"
            )
        for name, vol in self.modalities.items():
            if not vol.geometry.matches(self.labels.geometry):
                raise ContractError(f"case {self.case_id}: modality {name} geometry differs from labels")


@dataclass(frozen=True, eq=False)
class LesionPatch:
    """Generator output contract: per-modality intensities, a label patch
    over the scheme alphabet, and a soft blend weight field in [0, 1] that
    is zero on the patch border shell."""

    intensities: np.ndarray  # (n_modalities, px, py, pz)
    labels: np.ndarray  # (px, py, pz) uint8
    blend: np.ndarray  # (px, py, pz) float64 in [0, 1]

    def __post_init__(self):
        if self.intensities.shape[1:] != self.labels.shape or self.labels.shape != self.blend.shape:
            raise ContractError("lesion patch fields must share extents")
        if not self.labels.any():
            raise ContractError("lesion patch must contain at least one labelled voxel")
        if self.blend.min() < 0 or self.blend.max() > 1:
            raise ContractError("blend weights must lie in [0, 1]")
        shell = np.ones(self.labels.shape, dtype=bool)
        shell[1:-1, 1:-1, 1:-1] = False
        if self.blend[shell].any():
            raise ContractError("blend weight must be zero on the patch border shell")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class InsertionSpec:
    """Knobs for one augmentation run."""

    seed: int
    copies: int = 1
    max_retries: int = 25
    use_generated_label_p: float = 0.5
    min_lesion_distance_voxels: int = 2
    blend_sigma_voxels: float = 2.0
    head_mask_source: str = "nonzero"
    label_size_range: tuple[int, int] = (3, 7)

    def __post_init__(self):
        if self.copies < 1:
            raise ContractError(f"copies must be >= 1, got {self.copies}")
        if self.max_retries < 1:
            raise ContractError(f"max_retries must be >= 1, got {self.max_retries}")
        if not 0.0 <= self.use_generated_label_p <= 1.0:
            raise ContractError("use_generated_label_p must be in [0, 1]")
        if self.min_lesion_distance_voxels < 0:
            raise ContractError("min_lesion_distance_voxels must be >= 0")
        if self.blend_sigma_voxels < 0:
            raise ContractError("blend_sigma_voxels must be >= 0")
        if self.head_mask_source not in HEAD_MASK_SOURCES:
            raise ContractError(
                f"head_mask_source must be one of {HEAD_MASK_SOURCES}, got {self.head_mask_source!r}"
            )


def _case_rng(seed: int, case_id: str, copy_index: int) -> np.random.Generator:
    digest = hashlib.sha256(case_id.encode("utf-8")).digest()
    case_hash = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, case_hash, copy_index]))


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    # uniform random rotation from a normalised Gaussian quaternion
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate_random_label(
    scheme: LabelScheme,
    size_range: tuple[int, int],
    rng: np.random.Generator,
    margin: int = _PATCH_MARGIN,
    max_extent: int = 96,
) -> np.ndarray:
    """Random nested label patch.

    The support is a randomised superellipsoid with a smooth radial
    perturbation. Glioma patches nest a NETC core inside an ET shell
    inside an SNFH outer blob (inner classes always lie within the outer
    support); meningioma patches are a single GTV blob.
    """
    lo, hi = (int(size_range[0]), int(size_range[1]))
    if lo < 2 or hi < lo:
        raise ContractError(f"degenerate size range {size_range!r}; need 2 <= min <= max")
    half_limit = (max_extent - 1) // 2
    if int(np.ceil(hi / 0.8)) + margin > half_limit:
        raise ContractError(f"size range {size_range!r} exceeds the patch limit of {max_extent} voxels")

    for _ in range(8):
        semiaxes = rng.uniform(lo, hi, size=3)
        exponent = rng.uniform(2.0, 4.0)
        amp = rng.uniform(0.05, 0.2)
        half = int(np.ceil(semiaxes.max() / (1.0 - amp))) + margin
        n = 2 * half + 1
        axes = np.arange(n, dtype=np.float64) - half
        gx, gy, gz = np.meshgrid(axes, axes, axes, indexing="ij")
        coords = np.stack([gx, gy, gz])
        rot = _rotation_matrix(rng)
        local = np.tensordot(rot, coords, axes=(1, 0))
        u = np.zeros((n, n, n), dtype=np.float64)
        for axis in range(3):
            u += np.abs(local[axis] / semiaxes[axis]) ** exponent
        u **= 1.0 / exponent

        noise = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), sigma=max(1.0, hi / 2.5))
        peak = np.abs(noise).max()
        if peak > 0:
            noise /= peak
        u = u * (1.0 + amp * noise)

        support = u <= 1.0
        n_support = int(support.sum())
        if n_support >= 3:
            break
    else:
        raise ContractError(f"could not realise a non-trivial blob for size range {size_range!r}")

    patch = np.zeros((n, n, n), dtype=np.uint8)
    if scheme.name == "meningioma-rt":
        patch[support] = 1
        return patch

    # nested glioma bands by radial rank: NETC core, ET shell, SNFH outer
    order = np.argsort(u[support], kind="stable")
    flat_idx = np.flatnonzero(support.ravel())[order]
    f1 = rng.uniform(0.15, 0.4)
    f2 = rng.uniform(0.55, 0.8)
    n1 = max(1, int(f1 * n_support))
    n2 = max(n1 + 1, int(f2 * n_support))
    n2 = min(n2, n_support - 1)
    n1 = min(n1, n2 - 1)
    flat = patch.ravel()
    flat[flat_idx[:n1]] = 1
    flat[flat_idx[n1:n2]] = 3
    flat[flat_idx[n2:]] = 2
    return patch


def procedural_lesion(
    label_patch: np.ndarray,
    n_modalities: int,
    rng: np.random.Generator,
    blend_sigma: float = 2.0,
    intensity_scales=None,
) -> LesionPatch:
    """Build lesion intensities for a label patch.

    Per modality, each class gets a sampled mean intensity and spatially
    correlated noise; the blend weight is a smoothed indicator of the
    label support, forced to zero on the border shell.
    """
    labels = np.asarray(label_patch, dtype=np.uint8)
    if not labels.any():
        raise ContractError("procedural lesion requires a non-empty label patch")
    if n_modalities < 1:
        raise ContractError("n_modalities must be >= 1")
    if intensity_scales is None:
        intensity_scales = [1.0] * n_modalities
    if len(intensity_scales) != n_modalities:
        raise ContractError(f"{len(intensity_scales)} intensity scales for {n_modalities} modalities")

    support = labels != 0
    classes = sorted(int(v) for v in np.unique(labels) if v != 0)
    # the class forming the rind of the support; halo voxels fade from it
    boundary = support & ~ndimage.binary_erosion(support)
    rind_labels = labels[boundary] if boundary.any() else labels[support]
    outer_class = int(np.bincount(rind_labels).argmax())

    intensities = np.empty((n_modalities,) + labels.shape, dtype=np.float64)
    means = np.zeros(int(labels.max()) + 1, dtype=np.float64)
    for m in range(n_modalities):
        for cls in classes:
            means[cls] = rng.uniform(0.4, 1.6)
        means[0] = means[outer_class]
        noise = ndimage.gaussian_filter(rng.standard_normal(labels.shape), sigma=1.2)
        noise *= rng.uniform(0.03, 0.12)
        intensities[m] = (means[labels] + noise) * float(intensity_scales[m])

    blend = ndimage.gaussian_filter(support.astype(np.float64), sigma=blend_sigma) if blend_sigma > 0 else support.astype(np.float64)
    peak = blend.max()
    if peak > 0:
        blend /= peak
    np.clip(blend, 0.0, 1.0, out=blend)
    blend[0, :, :] = blend[-1, :, :] = 0.0
    blend[:, 0, :] = blend[:, -1, :] = 0.0
    blend[:, :, 0] = blend[:, :, -1] = 0.0
    return LesionPatch(intensities, labels, blend)


def head_mask_for(case: CaseRecord, source: str) -> BinaryMask:
    """Head mask: union of non-zero intensities (skull-stripped data) or
    Otsu foreground of the first modality (native data)."""
    if source not in HEAD_MASK_SOURCES:
        raise ContractError(f"unknown head mask source {source!r}")
    first = next(iter(case.modalities.values()))
    if source == "otsu":
        return foreground_mask(first)
    union = np.zeros(first.geometry.extents, dtype=bool)
    for vol in case.modalities.values():
        union |= vol.data != 0
    return BinaryMask(first.geometry, union)


def sample_center(
    case: CaseRecord,
    label_patch: np.ndarray,
    spec: InsertionSpec,
    rng: np.random.Generator,
    head: BinaryMask | None = None,
    forbidden: BinaryMask | None = None,
) -> tuple[int, int, int]:
    """Uniform rejection sampling of a patch center.

    Accepts a center iff the patch label support lies fully inside the
    head mask, overlaps no existing label, and keeps the configured
    Chebyshev distance from existing lesions. Raises ``PlacementError``
    after ``max_retries`` failed draws.
    """
    if head is None:
        head = head_mask_for(case, spec.head_mask_source)
    if forbidden is None:
        forbidden = dilate(
            BinaryMask(case.labels.geometry, case.labels.data != 0),
            spec.min_lesion_distance_voxels,
        )
    support = np.asarray(label_patch) != 0
    if not support.any():
        raise ContractError("label patch has no support")
    ext = np.array(support.shape)
    half = ext // 2
    shape = np.array(case.labels.geometry.extents)
    candidates = np.flatnonzero(head.data.ravel())
    if candidates.size == 0:
        raise PlacementError(f"case {case.case_id}: head mask is empty")
    for _ in range(spec.max_retries):
        flat = int(candidates[rng.integers(candidates.size)])
        center = np.array(np.unravel_index(flat, tuple(shape)))
        start = center - half
        stop = start + ext
        if (start < 0).any() or (stop > shape).any():
            continue
        window = tuple(slice(int(a), int(b)) for a, b in zip(start, stop))
        if not head.data[window][support].all():
            continue
        if forbidden.data[window][support].any():
            continue
        return tuple(int(c) for c in center)
    raise PlacementError(
        f"case {case.case_id}: no admissible lesion site in {spec.max_retries} retries"
    )


def insert_lesion(
    case: CaseRecord,
    patch: LesionPatch,
    center: tuple[int, int, int],
    copy_index: int,
) -> CaseRecord:
    """Blend the patch into every modality and overwrite labels where the
    patch label is non-zero. Voxels outside the patch window are copied
    bit-identically; the new case id is ``<case>-<copy_index>``."""
    if patch.intensities.shape[0] != len(case.modalities):
        raise ContractError(
            f"patch has {patch.intensities.shape[0]} modalities, case has {len(case.modalities)}"
        )
    ext = np.array(patch.extents)
    half = ext // 2
    start = np.array(center) - half
    stop = start + ext
    shape = np.array(case.labels.geometry.extents)
    if (start < 0).any() or (stop > shape).any():
        raise ContractError(f"patch window {start.tolist()}..{stop.tolist()} exceeds volume bounds {shape.tolist()}")
    window = tuple(slice(int(a), int(b)) for a, b in zip(start, stop))

    w = patch.blend
    new_modalities: dict[str, IntensityVolume] = {}
    for m, (name, vol) in enumerate(case.modalities.items()):
        out = vol.data.copy()
        blended = (1.0 - w) * out[window].astype(np.float64) + w * patch.intensities[m]
        if np.issubdtype(out.dtype, np.integer):
            blended = np.rint(blended)
        out[window] = blended.astype(out.dtype)
        new_modalities[name] = IntensityVolume(vol.geometry, out)

    new_labels = case.labels.data.copy()
    support = patch.labels != 0
    target = new_labels[window]
    target[support] = patch.labels[support]
    new_labels[window] = target

    return CaseRecord(
        case_id=f"{case.case_id}-{copy_index}",
        modalities=new_modalities,
        labels=LabelVolume(case.labels.geometry, new_labels),
        scheme=case.scheme,
    )


@dataclass(frozen=True)
class CasePaths:
    case_id: str
    modality_paths: dict[str, str]
    label_path: str


def scan_dataset(dataset_dir, scheme: LabelScheme) -> list[CasePaths]:
    """Discover cases laid out as ``<id>/<id>_<modality>.nii[.gz]`` plus
    ``<id>/<id>_seg.nii[.gz]``."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise ContractError(f"dataset directory {root} does not exist")
    expected = MODALITIES_BY_SCHEME[scheme.name]
    cases = []
    for entry in sorted(p for p in root.iterdir() if p.is_dir()):
        case_id = entry.name
        paths = {}
        missing = []
        for mod in expected + ("seg",):
            found = None
            for suffix in (".nii.gz", ".nii"):
                candidate = entry / f"{case_id}_{mod}{suffix}"
                if candidate.exists():
                    found = candidate
                    break
            if found is None:
                missing.append(mod)
            else:
                paths[mod] = str(found)
        if missing:
            raise DataError(f"case {case_id}: missing files for {missing}")
        cases.append(
            CasePaths(
                case_id,
                {mod: paths[mod] for mod in expected},
                paths["seg"],
            )
        )
    if not cases:
        raise ContractError(f"dataset directory {root} contains no cases")
    return cases


def load_case(paths: CasePaths, scheme: LabelScheme) -> CaseRecord:
    modalities = {mod: read_intensity(p) for mod, p in paths.modality_paths.items()}
    labels = read_labels(paths.label_path)
    validate_labels(labels, scheme)
    return CaseRecord(paths.case_id, modalities, labels, scheme)


def save_case(case: CaseRecord, out_dir) -> None:
    case_dir = Path(out_dir) / case.case_id
    for name, vol in case.modalities.items():
        code = CODE_BY_DTYPE.get(vol.data.dtype, 16)
        data = vol.data if vol.data.dtype in CODE_BY_DTYPE else vol.data.astype(np.float32)
        write_intensity(case_dir / f"{case.case_id}_{name}.nii.gz",
                        IntensityVolume(vol.geometry, data), datatype_code=code)
    write_labels(case_dir / f"{case.case_id}_seg.nii.gz", case.labels)


def manifest_summary(original: int, created: int, seed: int) -> dict:
    """Dataset-multiplication bookkeeping: total = new + original."""
    return {"summary": True, "seed": seed, "original": original, "created": created,
            "total": original + created}


def _crop_donor_labels(donor_labels: LabelVolume, margin: int = _PATCH_MARGIN) -> np.ndarray | None:
    data = donor_labels.data
    coords = np.nonzero(data)
    if coords[0].size == 0:
        return None
    box = tuple(
        slice(max(0, int(c.min()) - margin), min(s, int(c.max()) + 1 + margin))
        for c, s in zip(coords, data.shape)
    )
    return data[box].astype(np.uint8)


def augment_case(
    case: CaseRecord,
    spec: InsertionSpec,
    copy_index: int,
    donor: tuple[str, LabelVolume] | None,
    head: BinaryMask,
    forbidden: BinaryMask,
) -> tuple[CaseRecord | None, dict]:
    """One (case, copy) attempt; returns the new case (or None on skip)
    plus its manifest record."""
    rng = _case_rng(spec.seed, case.case_id, copy_index)
    record: dict = {"case": case.case_id, "copy": copy_index, "new_case": None,
                    "label_source": None, "donor": None, "center": None,
                    "success": False, "reason": None}
    use_generated = bool(rng.random() < spec.use_generated_label_p)
    label_patch = None
    if not use_generated and donor is not None:
        label_patch = _crop_donor_labels(donor[1])
        if label_patch is not None:
            record["label_source"] = "real"
            record["donor"] = donor[0]
    if label_patch is None:
        record["label_source"] = "generated" if use_generated else "generated-fallback"
        label_patch = generate_random_label(case.scheme, spec.label_size_range, rng)
    scales = []
    for vol in case.modalities.values():
        inside = np.abs(vol.data[head.data].astype(np.float64))
        scale = float(np.percentile(inside, 95)) if inside.size else 0.0
        scales.append(scale if scale > 0 else 1.0)
    patch = procedural_lesion(
        label_patch, len(case.modalities), rng,
        blend_sigma=spec.blend_sigma_voxels, intensity_scales=scales,
    )
    try:
        center = sample_center(case, patch.labels, spec, rng, head=head, forbidden=forbidden)
    except PlacementError as e:
        record["reason"] = str(e)
        return None, record
    new_case = insert_lesion(case, patch, center, copy_index)
    record["new_case"] = new_case.case_id
    record["center"] = [int(c) for c in center]
    record["success"] = True
    return new_case, record


def _augment_case_job(args) -> list[dict]:
    paths, donor, out_dir, scheme_name, spec = args
    scheme = scheme_by_name(scheme_name)
    case = load_case(paths, scheme)
    head = head_mask_for(case, spec.head_mask_source)
    forbidden = dilate(
        BinaryMask(case.labels.geometry, case.labels.data != 0),
        spec.min_lesion_distance_voxels,
    )
    donor_pair = (donor[0], read_labels(donor[1])) if donor else None
    records = []
    for copy_index in range(1, spec.copies + 1):
        new_case, record = augment_case(case, spec, copy_index, donor_pair, head, forbidden)
        if new_case is not None:
            save_case(new_case, out_dir)
        records.append(record)
    return records


def augment_dataset(
    dataset_dir,
    out_dir,
    scheme: LabelScheme,
    spec: InsertionSpec,
    workers: int = 1,
) -> list[dict]:
    """Augment every case ``spec.copies`` times.

    Writes new cases and a ``manifest.jsonl`` (one record per attempt plus
    a bookkeeping summary) into ``out_dir``; returns the manifest records.
    Output is deterministic for a fixed (seed, spec, dataset) and does not
    depend on the worker count.
    """
    cases = scan_dataset(dataset_dir, scheme)
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    donor_ids = _donor_table(cases)
    jobs = []
    for paths in cases:
        donor = donor_ids.get(paths.case_id)
        jobs.append((paths, donor, str(out_root), scheme.name, spec))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_case = list(pool.map(_augment_case_job, jobs))
    else:
        per_case = [_augment_case_job(job) for job in jobs]

    records = [rec for group in per_case for rec in group]
    records.sort(key=lambda r: (r["case"], r["copy"]))
    created = sum(1 for r in records if r["success"])
    summary = manifest_summary(original=len(cases), created=created, seed=spec.seed)
    with open(out_root / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(json.dumps(summary, sort_keys=True) + "\n")
    return records + [summary]


def _donor_table(cases: list[CasePaths]) -> dict[str, tuple[str, str]]:
    """Deterministic donor assignment: each case borrows the next case's
    annotation (sorted order); single-case datasets get no donor."""
    donors: dict[str, tuple[str, str]] = {}
    if len(cases) < 2:
        return donors
    for i, paths in enumerate(cases):
        donor = cases[(i + 1) % len(cases)]
        donors[paths.case_id] = (donor.case_id, donor.label_path)
    return donors
