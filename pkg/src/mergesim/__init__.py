"""Two-party secure-inference simulator: fixed-point MPC over additive
shares, a toy transformer, a constant-attention merge compiler, an
embedding-resending generation runtime, and byte-exact communication
accounting."""

__version__ = "0.1.0"
