"""Label-shift adaptation of a multi-label image classifier.

Train a base network on source-region images, re-fit its last layer on a
small labelled target sample mixed with source data, and blend the
resulting model groups with searched weights.
"""

from .core import Rng, make_rng
from .dataset import DatasetBundle, GeneratorConfig, Split, generate
from .estimators import LastLayerAdapter, MultilabelNet, WeightedGroupEnsemble
from .metrics import f2_sample, mean_f2

__version__ = "0.1.0"

__all__ = [
    "DatasetBundle",
    "GeneratorConfig",
    "LastLayerAdapter",
    "MultilabelNet",
    "Rng",
    "Split",
    "WeightedGroupEnsemble",
    "f2_sample",
    "generate",
    "make_rng",
    "mean_f2",
]
