"""Query-only source-free domain adaptation.

A target model is trained from hard labels returned by a sealed ensemble of
source models, refined label confidences, centroid pseudo-labels and
distributionally perturbed third-party queries.
"""

from ._validation import ConfigError
from .dat import DatConfig, DistributionalAdversarialPerturber, dat_generate, feature_kl
from .data import (
    DatasetCorruptionError,
    DatasetLoadError,
    LabeledDataset,
    SyntheticConfig,
    UnlabeledDataset,
    load_dataset,
    make_synthetic_shift_suite,
    save_dataset,
)
from .mia import MembershipConfig, MembershipInferenceAttack, run_membership_experiment
from .network import (
    SmallCNNClassifier,
    TrainConfig,
    TrainingDivergedError,
    build_small_cnn,
    grad_wrt_input,
    load_model,
    save_model,
    train_supervised,
)
from .oracle import BoundaryViolation, Oracle, ProtocolError, SourceEnsemble, query_session, train_source_ensemble
from .pipeline import (
    CentroidQueryClassifier,
    ExperimentConfig,
    GaussianNoiseQueryClassifier,
    PipelineConfig,
    RunReport,
    SFUDAClassifier,
    build_synthetic_world,
    run_pipeline,
    run_synthetic_experiment,
    stage_dat_retrain,
    stage_init_another,
    stage_target_finetune,
)
from .refine import (
    CentroidPseudoLabeler,
    DepictRefiner,
    centroid_pseudo_labels,
    depict_refine,
    pseudo_label_target,
)
from .service import OracleServer, RemoteOracle

__version__ = "0.1.0"

__all__ = [name for name, obj in list(globals().items())
           if not name.startswith("_") and not isinstance(obj, type(__import__("sys")))]
