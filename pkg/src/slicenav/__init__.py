"""slicenav: volumes -> controllable slice trajectories -> world-model pretraining."""

__version__ = "0.1.0"
