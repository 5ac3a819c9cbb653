"""CSI prediction for mobile MIMO channels with ODE-RNNs, in plain numpy."""

__version__ = "0.1.0"
