"""Learnable cross-shaped shallow noise defense for salient object detection, on a small numpy autodiff engine."""
from .attacks import AdvResult, AttackSpec, attack_dataset, fgsm, pgd, rosa_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Sample, load_dataset, save_sample, synth_generate
from .metrics import EvalReport, adaptive_threshold, evaluate, f_beta, mae
from .sodnet import ModelConfig, SodModel, build_model, cross_pad, forward, freeze_for_phase2, noise_gt
from .training import LossConfig, TrainConfig, train_baseline, train_leno, train_phase1, train_phase2

__version__ = "0.1.0"
