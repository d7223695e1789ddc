"""Desk-scale collaborative training stack.

Building blocks for synchronous-equivalent distributed optimization over
slow, unreliable, heterogeneous peers: blockwise 8-bit tensor compression,
LAMB/Adam with compressible optimizer state, an adaptive-batch round
protocol with robust aggregation, a deterministic network simulator,
a transformer memory calculator, and compressed dataset shards.
"""

__version__ = "0.1.0"
