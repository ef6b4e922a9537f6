"""Stage-aware progress reward modeling and reward-aligned behavior cloning."""

__version__ = "0.1.0"
