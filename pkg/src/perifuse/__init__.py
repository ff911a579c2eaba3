"""Cross-sensor periocular verification: block comparators, trial protocol,
logistic score fusion, and EER/DET/Cllr evaluation."""

__version__ = "0.1.0"

from .errors import PerifuseError, ConfigError, DataError, NumericError
from .dataset import (
    SampleKey,
    SampleRef,
    CircleAnnotation,
    TrialSpec,
    load_manifest,
    generate_genuine_trials,
    generate_impostor_trials,
    generate_protocol,
    all_conditions,
)
from .preproc import load_image, to_gray, normalize_geometry, clahe
from .features import (
    BlockGrid,
    Template,
    make_grid,
    gabor_bank,
    extract_gabor,
    extract_lbp,
    extract_hog,
)
from .matching import (
    ScoreSet,
    TrialScore,
    compare_gabor,
    compare_hist,
    score_protocol,
    export_scores,
    read_scores,
    ingest_external_scores,
    merge_scoresets,
)
from .fusion import (
    FusionModel,
    train_llr,
    train_strategy,
    condition_llrs,
    subset_search,
)
from .evaluation import (
    compute_curve,
    compute_eer,
    det_points,
    compute_cllr,
    evaluate_llrs,
    generate_synthetic_scoreset,
    SyntheticSpec,
    ClassGaussians,
)
from .config import RunConfig, load_config

__all__ = [
    "PerifuseError", "ConfigError", "DataError", "NumericError",
    "SampleKey", "SampleRef", "CircleAnnotation", "TrialSpec",
    "load_manifest", "generate_genuine_trials", "generate_impostor_trials",
    "generate_protocol", "all_conditions",
    "load_image", "to_gray", "normalize_geometry", "clahe",
    "BlockGrid", "Template", "make_grid", "gabor_bank",
    "extract_gabor", "extract_lbp", "extract_hog",
    "ScoreSet", "TrialScore", "compare_gabor", "compare_hist",
    "score_protocol", "export_scores", "read_scores",
    "ingest_external_scores", "merge_scoresets",
    "FusionModel", "train_llr", "train_strategy", "condition_llrs", "subset_search",
    "compute_curve", "compute_eer", "det_points", "compute_cllr",
    "evaluate_llrs", "generate_synthetic_scoreset", "SyntheticSpec", "ClassGaussians",
    "RunConfig", "load_config",
]
