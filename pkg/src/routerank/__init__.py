"""Listwise route recommendation via pairwise comparison blocks.

Subpackages: ``tensor`` (autodiff core), ``roadnet``/``world`` (synthetic
data substrate), ``features`` (feature construction), ``model`` (the
ranker and baselines), ``training`` (losses and optimization),
``evaluate`` (metrics, ablations, explanations), and ``cli``.
"""

__version__ = "0.1.0"

from .model import ModelConfig, Ranker  # noqa: F401
from .training import TrainConfig, train  # noqa: F401
