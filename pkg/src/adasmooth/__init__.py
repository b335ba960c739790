"""Mix a standard and a robust classifier, attack the mixture, and certify it."""
from .attacks import AttackResult, AttackSpec, apgd_lite, attack_mixed, pgd
from .certify import (CertResult, LipschitzProfile, RsModel, certify_mixed, lipschitz_radius,
                      required_margin, rs_predict, rs_radius)
from .data import SyntheticSpec, generate, load_idx, split
from .mixing import MixConfig, MixedClassifier, mix_final, mixed_forward
from .mixnet import MixerNet, MixerTrainConfig, train_mixer

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "AttackSpec", "CertResult", "LipschitzProfile", "MixConfig", "MixedClassifier",
    "MixerNet", "MixerTrainConfig", "RsModel", "SyntheticSpec", "apgd_lite", "attack_mixed",
    "certify_mixed", "generate", "lipschitz_radius", "load_idx", "mix_final", "mixed_forward",
    "pgd", "required_margin", "rs_predict", "rs_radius", "split", "train_mixer",
]
