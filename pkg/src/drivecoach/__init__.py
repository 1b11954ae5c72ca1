"""Teacher-guided actor-critic driving agents in a kinematic traffic simulator."""

__version__ = "0.1.0"
