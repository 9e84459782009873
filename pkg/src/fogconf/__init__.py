"""Eventually consistent naming service for fog data platforms.

LWW element sets replicated by gossip, a quorum-write baseline, a
deterministic network simulator, and the experiment runner comparing them.
"""

from .crdt import LwwElementSet, LwwEntry, ReplicaClock, Timestamp
from .registry import Action, Registry, RegistryState

__version__ = "0.1.0"

__all__ = ["Action", "LwwElementSet", "LwwEntry", "Registry", "RegistryState", "ReplicaClock", "Timestamp"]
