"""Deep convolutional dictionary learning with probabilistic pooling."""

__version__ = "0.1.0"

from .model import Hyperparams, LayerSpec, NetworkModel, load_model, log_joint, \
    save_model, validate_chain
from .pool_ops import PoolShape
from .gibbs import SamplerSchedule, prune_atoms, pretrain, refine
from .collapse import CollapsedDictionary, project_dictionary, select_ml_pool_maps
from .inference import FeatureSet, deconvolve_features, generate_images, \
    interpolate_missing
from .classifier import KernelClassifier, train_classifier

__all__ = [
    "Hyperparams", "LayerSpec", "NetworkModel", "PoolShape", "SamplerSchedule",
    "CollapsedDictionary", "FeatureSet", "KernelClassifier",
    "load_model", "save_model", "log_joint", "validate_chain",
    "pretrain", "refine", "prune_atoms",
    "project_dictionary", "select_ml_pool_maps",
    "deconvolve_features", "interpolate_missing", "generate_images",
    "train_classifier",
]
