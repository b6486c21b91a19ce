"""camtraj: contrastive camera-trajectory encoders in plain numpy."""

__version__ = "0.1.0"
