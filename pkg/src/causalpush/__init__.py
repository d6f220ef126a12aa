"""Causal-action-influence exploration for planar pushing."""
from .cai import CausalActionInfluence, CaiConfig, cai_score
from .dynmodel import ResidualDynamics, kinematic_prior
from .rewards import RND, RewardConfig, total_reward
from .sim2d import SceneConfig, load_scene

__version__ = "0.1.0"
