"""Offline RL for propofol dosing: conservative Q-learning with a latent policy constraint."""

__version__ = "0.1.0"
