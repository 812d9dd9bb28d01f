"""Square-loss gradient flow and SGD for normalized deep ReLU networks."""

__version__ = "0.1.0"
