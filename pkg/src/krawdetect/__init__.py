"""Key-controlled Krawtchouk spatial-frequency detection of adversarial perturbations.

The toolkit decomposes images over weighted Krawtchouk polynomial bases
whose spatial and frequency parameters are selected by a secret 64-bit
key, integrates the coefficients into radial frequency-band features, and
trains a linear SVM to separate clean from adversarially perturbed
images.  A desk-scale attack and evaluation harness (gradient-sign
attacks against a logistic surrogate, benign perturbations, benchmark /
crossing / challenging / harmless protocols) reproduces the experimental
workflow end to end.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConsistencyError,
    DataError,
    DegenerateError,
    FormatError,
    IncompleteError,
    IoError,
    KrawdetectError,
    OrderError,
    RangeError,
    ShapeError,
    StabilityError,
    TruncationError,
    VersionError,
)
from .image_io import (
    Dataset,
    Image,
    LabeledExample,
    load_idx_pair,
    load_pgm,
    rgb_to_gray,
    save_idx_pair,
    save_pgm,
)
from .krawtchouk import (
    CoefficientSet,
    PolynomialTable,
    SpatialConfig,
    build_polynomial_table,
    decompose,
    eval_hypergeometric_reference,
    full_order_set,
    orthonormality_deviation,
    reconstruct,
    sign_change_count,
    sign_change_locations,
)
from .keyed_selection import (
    CandidateGrid,
    DetectorKey,
    SelectionPlan,
    SplitMix64,
    default_grid,
    derive_stream,
    generate_key,
    key_fingerprint,
    read_key_file,
    sample_plan,
    write_key_file,
)
from .features import (
    BandPartition,
    EnhancementState,
    FeatureVector,
    extract_feature_vector,
    fit_enhancement,
    integrate_bands,
    partition_bands,
)
from .svm import (
    DetectorModel,
    SvmModel,
    TrainConfig,
    load_model,
    persist_roundtrip,
    predict,
    save_model,
    train_svm,
)
from .attacks import (
    DefenseAwareOutcome,
    DefenseAwareSpec,
    FeatureSubset,
    PerturbationSpec,
    SubsetPenalty,
    SurrogateModel,
    attack_dataset,
    attack_defense_aware,
    attack_fgsm,
    attack_pgd,
    bim_spec,
    detector_subset,
    feature_correlation,
    fgsm_spec,
    fooling_rate,
    pgd_spec,
    perturb_harmless,
    train_surrogate,
)
from .harness import (
    ConfusionCounts,
    DataConfig,
    DetectorOptions,
    ExperimentConfig,
    Report,
    ReportRow,
    Seeds,
    apply_detector,
    compute_metrics,
    emit_report,
    fit_detector,
    read_report_json,
    run_experiment,
    run_experiment_with_artifacts,
    synthetic_victim_dataset,
)
