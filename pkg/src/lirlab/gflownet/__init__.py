"""Tabular GFlowNets on HyperGrid with TB, ModTB, LPV and ModLPV losses."""

from .env import (COPRIME, COSINE, ORIGINAL, VARIANTS, XOR, HyperGrid, RewardSpec, enumerate_modes,
                  mode_mask, raw_reward, reward)
from .losses import LOSSES, loss, loss_and_grad, loss_lpv, loss_modlpv, loss_modtb, loss_tb
from .model import (EPSILON_UNIFORM, ON_POLICY, TabularGFN, TrajectoryBatch, all_trajectories,
                    balanced_policy, batch_from, exact_terminal_distribution, sample_trajectories,
                    target_distribution)
from .train import TrainConfig, TrainTrace, eval_metrics, js_divergence, moving_average, train
