"""pairscan: plant, detect, and unlearn class-pair backdoors in dense classifiers."""

from .anomaly import AnomalyResult, anomaly_score, assess, mad_null, std_normal_quantile, threshold
from .attack import (
    AttackSpec,
    ClassPair,
    TriggerSpec,
    attack_success_rate,
    build_attack_spec,
    embed,
    poison,
)
from .data import LabeledDataset, make_synthetic_dataset, split_per_class
from .detector import (
    BenchmarkResult,
    DetectionReport,
    DetectorConfig,
    MitigationConfig,
    baseline_dagger,
    baseline_ddagger,
    detect,
    detect_combined,
    detect_multi,
    evaluate_benchmark,
    mitigate,
)
from .nn import DenseClassifier, TrainConfig, accuracy, forward, init_model, split_at, train
from .reverse import (
    REConfig,
    TriggerEstimate,
    reverse_engineer_all_pairs,
    reverse_engineer_intermediate,
    reverse_engineer_patch,
    reverse_engineer_perturbation,
)
from .select import CandidateSet, agglomerative_select, exhaustive_select, objective_H
from .transfer import TRMatrix, auto_tune_image_count, tr_matrix, transferability

__version__ = "0.1.0"
