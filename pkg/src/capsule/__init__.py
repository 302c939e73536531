"""Safety-filtered on-policy RL with learned control-affine dynamics."""

__version__ = "0.1.0"
