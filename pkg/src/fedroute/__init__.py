"""Multi-variant vehicle routing with a from-scratch attention policy and federated fine-tuning."""

from .classic_baseline import gap, greedy_construct, local_search, solve
from .estimators import ClassicSolver, FederatedRouter, PolicyRouter
from .fed_proto import Client, FederationConfig, federate
from .merge_ops import fed_avg, ties_merge
from .policy_net import ArchConfig, ParamVector, init_params, rollout
from .rl_train import TrainConfig, pretrain
from .vrp_core import (ALL_VARIANTS, FINETUNE_VARIANTS, PRETRAIN_VARIANTS, Instance, Solution,
                       VariantSpec, check_feasibility, evaluate, generate_dataset, generate_instance,
                       make_variant, variant_from_name)

__version__ = "0.1.0"
