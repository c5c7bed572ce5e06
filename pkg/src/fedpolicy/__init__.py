"""Policy-governed federated learning with hash-verified models and a hash-chained model store."""

from .canon import ModelDigest, canonical_deserialize, canonical_serialize, decrypt_model, encrypt_model, model_hash
from .chain import Chain, append_block, verify_chain
from .experiments import ExperimentConfig, compare_runs, run_experiment
from .model import ArchitectureSpec, ArchKind, ModelParams, TrainingConfig, evaluate, init_model, local_train
from .nodes import Federation, RoundState, bdm_consensus, fedavg, run_round

__version__ = "0.1.0"
