"""Robust inference by convex interpolation of learned transport maps.

Train a residual network whose block outputs are energy-regularized toward a
discrete optimal-transport map, snapshot the training set together with the
learned feature map as a transport atlas, and answer test queries by solving
a small convex interpolation problem over retrieved neighbors instead of
running the network forward. The solve carries a per-window Lipschitz
guarantee; attacks, metrics, a differentiable surrogate, and an attention
Lipschitz certificate round out the evaluation harness.
"""

from .attention import (AttentionSpec, attention_forward,
                        attention_lipschitz_bound, empirical_attention_lipschitz)
from .cip import (CipSolution, SmoothnessWindow, constraint_constant,
                  constraint_matrix, feasibility, robust_infer, solve_qcp)
from .datasets import Dataset, SyntheticSpec, generate_synthetic
from .defenses import KNNMeanDefense, NetDefense, OTADDefense, SurrogateDefense
from .embedding import embedding_attack, train_embedding, triplet_loss
from .errors import (ConfigError, DataFormatError, InferenceError,
                     OtrobustError, ShapeError, SolverError, TrainingError,
                     UndefinedValueError, WindowError)
from .neighbors import Atlas, NeighborQuery, build_atlas, knn, knn_batch
from .network import (ResidualNet, energy_regularizer, gradient_check,
                      load_model, save_model, train_network)
from .robustness import AttackConfig, evaluate_defense, relative_error
from .surrogate import SurrogateAttention, SurrogateMLP, train_surrogate

__version__ = "0.1.0"

__all__ = [
    "Atlas", "AttackConfig", "AttentionSpec", "CipSolution", "ConfigError",
    "DataFormatError", "Dataset", "InferenceError", "KNNMeanDefense",
    "NeighborQuery", "NetDefense", "OTADDefense", "OtrobustError",
    "ResidualNet", "ShapeError", "SmoothnessWindow", "SolverError",
    "SurrogateAttention", "SurrogateDefense", "SurrogateMLP", "SyntheticSpec",
    "TrainingError", "UndefinedValueError", "WindowError",
    "attention_forward", "attention_lipschitz_bound", "build_atlas",
    "constraint_constant", "constraint_matrix", "embedding_attack",
    "empirical_attention_lipschitz", "energy_regularizer", "evaluate_defense",
    "feasibility", "generate_synthetic", "gradient_check", "knn", "knn_batch",
    "load_model", "relative_error", "robust_infer", "save_model", "solve_qcp",
    "train_embedding", "train_network", "train_surrogate", "triplet_loss",
]
