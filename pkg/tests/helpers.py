"""Shared fixture builders for the test suite."""

import numpy as np

from tumorkit.augment import MODALITIES_BY_SCHEME
from tumorkit.ensemble import ProbabilityVolume
from tumorkit.nifti import write_intensity, write_labels
from tumorkit.volume import BinaryMask, IntensityVolume, LabelVolume, VolumeGeometry

# dyadic spacings keep every squared distance exactly representable
DYADIC_SPACINGS = [
    (1.0, 1.0, 1.0),
    (2.0, 1.0, 1.0),
    (0.5, 0.5, 0.5),
    (1.25, 1.0, 0.75),
    (1.0, 2.5, 0.5),
]


def geom(shape, spacing=(1.0, 1.0, 1.0)):
    affine = np.diag(list(spacing) + [1.0])
    return VolumeGeometry(tuple(shape), tuple(spacing), affine)


def mask_of(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=bool)
    return BinaryMask(geom(data.shape, spacing), data)


def labels_of(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    return LabelVolume(geom(data.shape, spacing), data.astype(np.uint8))


def intensity_of(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    return IntensityVolume(geom(data.shape, spacing), data)


def sphere(shape, center, radius):
    grid = np.indices(shape)
    d2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
    return d2 <= radius * radius


def random_mask(rng, shape, density=None):
    if density is None:
        density = rng.uniform(0.05, 0.6)
    return rng.random(shape) < density


def random_blob_labels(rng, shape, n_blobs, label_values=(1, 2, 3, 4)):
    """A label volume made of disjoint random solid boxes."""
    data = np.zeros(shape, dtype=np.uint8)
    for _ in range(n_blobs):
        size = rng.integers(2, 5, size=3)
        lo = [rng.integers(0, max(1, shape[a] - size[a])) for a in range(3)]
        box = tuple(slice(int(lo[a]), int(lo[a] + size[a])) for a in range(3))
        data[box] = int(rng.choice(label_values))
    return data


def random_probability(rng, shape, n_classes):
    raw = rng.random(tuple(shape) + (n_classes,)) + 1e-3
    raw /= raw.sum(axis=3, keepdims=True)
    return ProbabilityVolume(geom(shape), raw)


def head_case_arrays(rng, shape=(32, 32, 32), scheme_name="glioma-post-treatment",
                     lesion=True):
    """Skull-stripped-style case: a bright ball of head tissue on a zero
    background, plus (optionally) one small labelled lesion inside it."""
    center = tuple(s // 2 for s in shape)
    radius = min(shape) // 2 - 3
    head = sphere(shape, center, radius)
    modalities = {}
    for name in MODALITIES_BY_SCHEME[scheme_name]:
        data = np.zeros(shape, dtype=np.float32)
        data[head] = (100.0 + 10.0 * rng.standard_normal(int(head.sum()))).astype(np.float32)
        modalities[name] = data
    labels = np.zeros(shape, dtype=np.uint8)
    if lesion:
        lesion_center = (center[0] + radius // 2, center[1], center[2])
        lesion_mask = sphere(shape, lesion_center, 2) & head
        labels[lesion_mask] = 1 if scheme_name == "meningioma-rt" else 3
    return modalities, labels


def write_case(case_dir, case_id, modalities, labels, spacing=(1.0, 1.0, 1.0)):
    g = geom(labels.shape, spacing)
    for name, data in modalities.items():
        write_intensity(case_dir / f"{case_id}_{name}.nii.gz",
                        IntensityVolume(g, np.asarray(data, dtype=np.float32)),
                        datatype_code=16)
    write_labels(case_dir / f"{case_id}_seg.nii.gz", LabelVolume(g, labels.astype(np.uint8)))


def make_dataset(root, rng, n_cases, scheme_name="glioma-post-treatment", shape=(32, 32, 32)):
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_cases):
        case_id = f"{i:05d}"
        case_dir = root / case_id
        case_dir.mkdir()
        modalities, labels = head_case_arrays(rng, shape, scheme_name)
        write_case(case_dir, case_id, modalities, labels)
        ids.append(case_id)
    return ids
