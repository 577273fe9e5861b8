"""Camera-model identification detector and adversarial attacks on it, built on a small numpy autodiff core."""
from .attacks import AttackOutcome, FgsmConfig, JsmaConfig, fgsm_attack_set, fgsm_perturb, jsma_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, build_model, forward_probs, predict

__version__ = "0.1.0"
