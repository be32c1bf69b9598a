"""dfabricsim: discrete-event simulator of a disaggregated rack interconnect.

Two systems can be simulated from the same workload descriptions:

* ``dfabric`` -- compute nodes attached to a CXL-style fabric with a unified
  memory pool, a pooled set of NICs for inter-rack traffic, and a per-node
  DRAM cache in front of the pool.
* ``tor_baseline`` -- the conventional rack: one private NIC per node, a
  top-of-rack switch with drop-tail port buffers, and an AIMD TCP.
"""

__version__ = "0.1.0"
