"""Desk-scale lab for backdoor attacks on non-IID federated learning.

Builds: label-skew partitioned FedAvg simulations; a two-stage client-side
attack (generator-based data inference against the live global model,
then source-specified backdoor training with update amplification);
evaluation metrics; and two post-training detection defenses.
"""

from .data import LabeledDataset, augment, load_dataset, synthetic_shapes
from .partition import (
    DataPartition,
    PartitionScheme,
    heterogeneity_index,
    partition_label_skew,
)
from .params import ModelParams
from .models import ClassifierSpec, GeneratorSpec, forward_classify, generate, init_params
from .runtime import FLConfig, RoundUpdate, aggregate, local_train, run_rounds
from .generation import (
    GeneratorState,
    InferenceConfig,
    SupplementaryDataset,
    generator_loss,
    label_supplementary,
    run_inference_round,
)
from .backdoor import (
    AttackPlan,
    TriggerSpec,
    amplify,
    apply_trigger,
    regular_backdoor_train,
    ssbl_loss,
    stage2_local_train,
)
from .metrics import (
    EvalReport,
    attack_success_rate,
    backdoor_score,
    evaluate_attack,
    main_task_accuracy,
)
from .defenses import ACConfig, DetectionReport, NCConfig, ac_detect, nc_detect

__version__ = "0.1.0"
