"""Noise-smoothed, gradient-masked text classification with an attack harness."""

from .analysis import MetricsSummary, latent_divergence, stability_eval, summarize
from .attacks import AttackConfig, AttackRecord, VictimHandle, greedy_attack, pwws_attack, run_campaign
from .estimator import RSMIClassifier, baseline_classifier
from .nn import ModelConfig, checkpoint_load, checkpoint_save, forward, init_params
from .numerics import (Decision, RadiusInput, RngStream, VoteGate, binom_consensus,
                       certified_radius, inv_norm_cdf, lipschitz_scan)
from .textdata import MASK, PAD, UNK, SynonymTable, Vocabulary, gen_synthetic, tokenize

__all__ = [
    "AttackConfig", "AttackRecord", "Decision", "MASK", "MetricsSummary", "ModelConfig", "PAD",
    "RSMIClassifier", "RadiusInput", "RngStream", "SynonymTable", "UNK", "VictimHandle",
    "Vocabulary", "VoteGate", "baseline_classifier", "binom_consensus", "certified_radius",
    "checkpoint_load", "checkpoint_save", "forward", "gen_synthetic", "greedy_attack",
    "init_params", "inv_norm_cdf", "latent_divergence", "lipschitz_scan", "pwws_attack",
    "run_campaign", "stability_eval", "summarize", "tokenize",
]

__version__ = "0.1.0"
