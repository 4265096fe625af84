"""Meta-RL with separate exploration and exploitation policies driven by an
information-gain intrinsic reward, implemented on numpy."""

__version__ = "0.1.0"
