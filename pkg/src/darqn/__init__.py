"""Deep attention recurrent Q-networks on small pixel games."""
from . import agent, envs, evalviz, numerics, training
from .agent import Architecture, Network, ParameterSet, count_params
from .envs import Catch, SeekAvoid, preprocess
from .numerics import RMSProp, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Architecture", "Catch", "Network", "ParameterSet", "RMSProp", "SeekAvoid", "Tape",
    "Tensor", "agent", "backward", "count_params", "envs", "evalviz", "numerics",
    "preprocess", "training",
]
