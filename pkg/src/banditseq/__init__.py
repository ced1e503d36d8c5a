"""banditseq: sequence-to-sequence learning from per-output bandit feedback.

A desk-scale toolkit: a small reverse-mode autodiff core, an attention GRU
encoder-decoder, score-function and pairwise-ranking gradient estimators
with control variates, simulated gGLEU feedback, and a synthetic
domain-adaptation experiment harness.
"""

__version__ = "0.1.0"

from .model import ModelParams, Vocabulary  # noqa: F401
from .objectives import TrainingConfig, bandit_train_loop  # noqa: F401
