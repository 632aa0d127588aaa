"""Synthetic shortcut perturbations for clean-label availability poisoning.

Generate linearly separable, patch-structured perturbations, add them to a
training set, and measure what they do to separability probes, victim CNNs
and t-SNE embeddings.
"""

from .dataio import LabeledImageSet, gen_shapes_dataset, load_cifar10, load_perts, save_perts
from .embed import ExactTSNE, silhouette, tsne_embed
from .numcore import Prng
from .poison import PoisonPlan, ShortcutPoisoner, apply_classes, apply_fraction, apply_full
from .probe import LinearProbe, TwoLayerProbe, fit_linear, fit_two_layer
from .shortgen import PerturbationSet, SynthConfig, synthesize
from .victim import SmallCNNClassifier, build_small_cnn, train

__version__ = "0.1.0"

__all__ = [
    "Prng",
    "SynthConfig",
    "PerturbationSet",
    "synthesize",
    "PoisonPlan",
    "apply_full",
    "apply_classes",
    "apply_fraction",
    "ShortcutPoisoner",
    "fit_linear",
    "fit_two_layer",
    "LinearProbe",
    "TwoLayerProbe",
    "build_small_cnn",
    "train",
    "SmallCNNClassifier",
    "tsne_embed",
    "silhouette",
    "ExactTSNE",
    "LabeledImageSet",
    "gen_shapes_dataset",
    "load_cifar10",
    "save_perts",
    "load_perts",
]
