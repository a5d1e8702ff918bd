"""Offline safety alignment of control policies via preference fine-tuning."""

from .align import (
    AlignConfig,
    FinetuneResult,
    MismatchLog,
    PreferenceTriple,
    TripleBatch,
    alignment_loss,
    build_triples,
    finetune,
    mismatch_quartiles,
    pretrain_bc,
    select_high_reward,
    train_ppl,
)
from .data import (
    PreferenceDatasets,
    StateIndex,
    build_preference_sets,
    jaccard_overlap,
    load_trajectories,
    nearest_counterfactual,
    partition,
    save_trajectories,
)
from .envs import CmdpSpec, Trajectory, make_env, rollout, synthesize_dataset
from .evaluation import (
    EvalReport,
    NormalizationStats,
    cvar,
    evaluate,
    normalized_cost,
    normalized_reward,
    safety_fraction,
)
from .nn import (
    AdamState,
    GaussianPolicy,
    MlpParams,
    adam_step,
    forward_mean,
    init_policy,
    load_policy,
    log_prob,
    sample_action,
    save_policy,
)

__version__ = "0.1.0"
