"""Few-shot terrain scooping with deep-kernel Gaussian process reward models.

A reward model is a neural feature extractor feeding two heads: a mean
network covering behavior shared across materials, and a kernel embedding
whose RBF distances drive exact GP posterior updates from a handful of
on-terrain scoops. Training alternates the two heads over material folds
so the kernel learns residual structure the mean cannot explain; the
decision loop scores a fixed action grid by UCB and scoops until one
reward clears the terrain's threshold.
"""

from .bench import (DeployReport, MaeReport, eval_kshot_mae, eval_simulated_deployment,
                    mean_model_mae, paired_sign_test)
from .config import BenchConfig, GenConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .decide import DatasetTarget, LiveTarget, ScorerConfig, run_deployment
from .errors import (ConfigError, IngestError, NumericalError, ScoopGpError, SelectionError,
                     SerializationError, ShapeError)
from .gp import (DeepGpModel, PosteriorPrediction, checkpoint_id, load_model, nlml, nlml_grad,
                 posterior, posterior_batch, save_model)
from .meta import CodegaResult, DkmtResult, train_codega, train_dkmt, train_mean
from .nnet import NetworkSpec, ParamVector, forward, init_params, load_params, save_params
from .tasks import (Material, MaterialPool, ScoopAction, ScoopRecord, TaskDataset, TerrainTask,
                    compute_features, enumerate_action_grid, generate_materials, generate_task,
                    ingest_released_dataset, read_database, reward_oracle, sample_ood_test_family,
                    sample_task_family, write_database)

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "CodegaResult", "ConfigError", "DatasetTarget", "DeepGpModel",
    "DeployReport", "DkmtResult", "GenConfig", "IngestError", "LiveTarget", "MaeReport",
    "Material", "MaterialPool", "ModelConfig", "NetworkSpec", "NumericalError",
    "ParamVector", "PosteriorPrediction", "RunConfig", "ScoopAction", "ScoopGpError",
    "ScoopRecord", "ScorerConfig", "SelectionError", "SerializationError", "ShapeError",
    "TaskDataset", "TerrainTask", "TrainConfig", "checkpoint_id", "compute_features",
    "enumerate_action_grid", "eval_kshot_mae", "eval_simulated_deployment",
    "generate_materials", "generate_task", "ingest_released_dataset", "load_config",
    "load_model", "load_params", "mean_model_mae", "nlml", "nlml_grad",
    "paired_sign_test", "posterior", "posterior_batch", "read_database",
    "reward_oracle", "run_deployment", "sample_ood_test_family", "sample_task_family",
    "save_model", "save_params", "train_codega", "train_dkmt", "train_mean",
    "write_database", "forward", "init_params",
]
