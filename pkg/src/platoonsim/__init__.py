"""platoonsim: signal-free intersection simulation with hierarchical DQN control."""

__version__ = "0.1.0"
