"""KL-regularized K-step policy iteration with tree-search policy improvement.

Library layout:
  core     configuration, counter-based RNG streams, replay buffer
  envs     deterministic toy environments and finite-support chains
  nets     flat-parameter MLPs with analytic gradients, Adam, checkpoints
  search   the tree-search improvement operator and its siblings
  oracle   exact recursions and statistical trials used for verification
  learner  the combined training loss and trust-region dual
  harness  actors, the training loop, evaluation
  cli      command-line entry points
"""

from .core import Config, ReplayBuffer, RngStream, Snippet, Transition, config_load
from .envs import ChainSpec, Pendulum, PointMass, TabularPolicy, chain_exact_env, make_env
from .nets import (AdamState, GaussianPolicyNet, Mlp, MlpSpec, adam_step,
                   gaussian_kl, target_sync)
from .oracle import exact_soft_q, full_tree_estimate, run_suite, unbiasedness_trial
from .search import (SearchResult, act_search, pg_refine, pi_rollout_weights,
                     resample_action, smc_sample, soft_backup, treepi_search)
from .learner import LearnerState, build_nets, learner_step
from .harness import evaluate, train

__version__ = "0.1.0"
