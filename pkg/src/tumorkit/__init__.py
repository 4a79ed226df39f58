"""tumorkit: batch toolkit for brain-tumour segmentation pipelines.

Library layers: NIfTI-1 I/O (`nifti`), geometry-aware volume primitives
(`volume`), label schemes and threshold post-processing (`schemes`),
probability-map ensembling (`ensemble`), evaluation metrics (`metrics`),
and synthetic-lesion augmentation (`augment`). The `tumorkit` console
script exposes the batch workflow.
"""

from .errors import (
    ContractError,
    DataError,
    DegenerateInputWarning,
    ParseError,
    PlacementError,
    TruncatedFileError,
    TumorkitError,
    UnsupportedFormatError,
)
from .volume import (
    BinaryMask,
    ComponentSet,
    IntensityVolume,
    LabelVolume,
    VolumeGeometry,
    connected_components,
    dilate,
    euclidean_distance_transform,
    foreground_mask,
    otsu_threshold,
    zscore_normalize,
)
from .nifti import NiftiHeader, read_nifti, write_nifti
from .schemes import (
    GLIOMA_POST_TREATMENT,
    MENINGIOMA_RT,
    LabelScheme,
    RegionSpec,
    ThresholdPolicy,
    apply_threshold_policy,
    region_mask,
    scheme_by_name,
)
from .ensemble import (
    EnsembleMember,
    EnsembleSpec,
    ProbabilityVolume,
    average_probabilities,
    labels_from_probabilities,
    run_ensemble,
)
from .metrics import (
    MetricsReport,
    aggregate_reports,
    dice,
    evaluate_case,
    hd95,
    lesion_wise_scores,
    match_lesions,
)
from .augment import (
    CaseRecord,
    InsertionSpec,
    LesionPatch,
    augment_dataset,
    generate_random_label,
    insert_lesion,
    procedural_lesion,
    sample_center,
)

__version__ = "0.1.0"
