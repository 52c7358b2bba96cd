"""Feature-disruptive adversarial attacks, PGD baselines and rank metrics on small CNNs."""

from .attacks import AttackBudget, AttackConfig, run_attack, run_attack_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import PredictionPair, aggregate
from .nn import build_model, forward_with_trace, mnist_cnn

__version__ = "0.1.0"
