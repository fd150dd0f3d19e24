"""Quadrotor fault-tolerant control with a learned online adaptation module."""

__version__ = "0.1.0"
