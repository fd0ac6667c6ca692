"""Communicating multi-agent DQN for landmark localization in 3D volumes."""

__version__ = "0.1.0"
