"""Cyclic knowledge distillation across federations, with server-based baselines."""

from .data import Dataset, FederatedSplit, PartitionSpec, gaussian_pool, gen_feature_shift, gen_label_shift, load_csv
from .losses import LossSpec, cross_entropy, distill_loss, lambda_schedule, proximal_term, total_loss
from .nncore import Model, copy_model, forward, init_model, sgd_step
from .protocol import HyperParams, RunResult, RunTrace, comm_cost, evaluate, run

__version__ = "0.1.0"
