"""Deep Q-learning with optimality tightening, at desk scale.

Multi-step lower and upper bounds on Q* taken from replayed episodes are
enforced with a quadratic penalty on top of the usual squared Bellman
error.  The package ships exact oracles (value iteration, BFS) for small
environments and the score metrics used for Atari-style comparisons.
"""

from .agent import Agent, TrainingConfig, epsilon_at, evaluate, select_action, train
from .bounds import BoundSet, PenaltyConfig, aggregate, batch_loss, lower_bound, penalty_loss, target, upper_bound
from .envs import ChainEnv, GridMaze, Mdp, MdpEnv, export_mdp, shortest_path_length, value_iteration
from .evalharness import ScoreRow, improvement, ingest_scores, moving_average, normalized_score, summarize
from .numcore import DenseNet, RmsPropState, backward, forward, gradient_check, rmsprop_step
from .qfunc import NetQ, TabularQ
from .replay import ReplayMemory, SampledItem, Transition

__version__ = "0.1.0"
