"""Score-based graph generation with a coupled system of SDEs over node features and adjacency."""

from .evaluation import MmdReport, StatHistogram, emd_1d, evaluate, mmd_gaussian_emd
from .graphs import Graph, GraphDataset, generate_community_small, load_graphs, quantize, save_graphs
from .models import ScoreModelA, ScoreModelX, build_models
from .sde import SdeKind, SdeSpec, marginal_params, perturb, transition_params
from .solvers import SamplerConfig, ScoreSource, generate, solve_reverse
from .training import LossConfig, TrainConfig, dsm_losses, train

__all__ = [
    "Graph", "GraphDataset", "LossConfig", "MmdReport", "SamplerConfig", "ScoreModelA", "ScoreModelX",
    "ScoreSource", "SdeKind", "SdeSpec", "StatHistogram", "TrainConfig", "build_models", "dsm_losses", "emd_1d",
    "evaluate", "generate", "generate_community_small", "load_graphs", "marginal_params", "mmd_gaussian_emd",
    "perturb", "quantize", "save_graphs", "solve_reverse", "train", "transition_params",
]
