"""Continual reinforcement learning with group-symmetric task grouping.

Equivariant actor-critic policies trained with PPO, grouped and recalled
online by exact 1-Wasserstein distances between invariant feature
distributions, on a planar manipulation suite whose task variants form
orbits of the dihedral group D2.
"""

from .autodiff import Adam, FieldTensor, ParamStore, load_checkpoint, no_grad, save_checkpoint
from .controller import AssignmentController, ControllerConfig, FrameBuffer
from .envs import GROUPS, Observation, TaskEnv, TaskInstance, make_task, transform_task
from .groups import GroupElement, GroupSpec, Representation, SpatialAction, d2
from .harness import RunConfig, default_schedule, evaluate_bundle, plot, run, score
from .layers import ExtractorConfig, FeatureExtractor, PlainConvExtractor
from .policy import ActionSpec, PolicyBundle, make_bundle
from .ppo import PpoConfig, RolloutBuffer, collect_episode, compute_gae, update
from .transport import FeatureCloud, TransportPlan, buffer_distance, cost_matrix, w1_distance

__version__ = "0.1.0"

__all__ = [
    "Adam", "FieldTensor", "ParamStore", "load_checkpoint", "no_grad",
    "save_checkpoint", "AssignmentController", "ControllerConfig", "FrameBuffer",
    "GROUPS", "Observation", "TaskEnv", "TaskInstance", "make_task",
    "transform_task", "GroupElement", "GroupSpec", "Representation",
    "SpatialAction", "d2", "RunConfig", "default_schedule", "evaluate_bundle",
    "plot", "run", "score", "ExtractorConfig", "FeatureExtractor",
    "PlainConvExtractor", "ActionSpec", "PolicyBundle", "make_bundle",
    "PpoConfig", "RolloutBuffer", "collect_episode", "compute_gae", "update",
    "FeatureCloud", "TransportPlan", "buffer_distance", "cost_matrix",
    "w1_distance",
]
