"""entlink: retrieve-then-read entity linking at desk scale.

The pipeline first retrieves candidate entities for each passage with a dual
encoder, then extracts mention spans of each candidate with a joint reader,
and keeps labeled spans whose rerank x span probability clears a threshold.
All gradients are hand-written and verified against finite differences.
"""

__version__ = "0.1.0"
