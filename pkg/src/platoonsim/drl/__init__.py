"""Self-contained deep Q-learning machinery on numpy float64.

Layers with manual backpropagation, sequential networks with checkpoint IO,
a ring replay memory, Adam, and the DQN agent loop (epsilon-greedy action
selection, TD targets against a periodically synced target network).
"""

from .layers import Conv2D, Dense, Flatten, MaxPool2D, ReLU, ZeroPad2D
from .network import (Sequential, coordination_network, formation_network,
                      load_checkpoint, network_from_spec, save_checkpoint)
from .replay import ReplayBuffer
from .agent import Adam, DQNAgent, Experience, select_action, td_targets

__all__ = [
    "Conv2D", "Dense", "Flatten", "MaxPool2D", "ReLU", "ZeroPad2D",
    "Sequential", "formation_network", "coordination_network",
    "network_from_spec", "save_checkpoint", "load_checkpoint",
    "ReplayBuffer", "Adam", "DQNAgent", "Experience", "select_action",
    "td_targets",
]
