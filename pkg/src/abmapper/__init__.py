"""Multi-agent path finding among dynamic obstacles with a BicNet actor and a
neighbour-attention critic."""

__version__ = "0.1.0"
