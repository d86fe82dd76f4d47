"""causal-kv: a local-first, causally consistent key-value store.

An etcd-style API served from an operation-based CRDT change-DAG, with two
history-addressing modes (global integer counter vs. hash-DAG frontier),
optimistic broadcast plus periodic anti-entropy replication, an append-only
durable change log, and a deterministic simulation harness.
"""

__version__ = "0.1.0"
