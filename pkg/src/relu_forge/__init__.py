"""Constructive narrow deep ReLU networks: memorizers, norm envelopes,
training certificates and grid approximators."""

from .approximate import (
    TARGETS,
    build_approximator,
    build_grid,
    build_signed_approximator,
    build_vector_approximator,
)
from .geometry import ConstructionTrace, Layer, Network, forward, forward_trace
from .memorize import (
    LabeledDataset,
    build_memorizer,
    build_signed_memorizer,
    build_vector_memorizer,
    memorizer_depth,
    verify_memorization,
)
from .norms import bound_l2, bound_linf, triple_norm
from .train import TrainConfig, certificate, j_lambda, theorem6_bound, train_gd

__version__ = "0.1.0"
