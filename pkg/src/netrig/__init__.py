"""netrig: modular end-to-end network system simulation.

Component simulators (host, NIC, switch, packet generator) run as
separate processes, speak fixed PCIe/Ethernet message interfaces over
shared-memory queues, and stay causally correct through pairwise
timestamp synchronization. An orchestrator assembles, runs, and
verifies whole virtual testbeds.
"""

__version__ = "0.1.0"
