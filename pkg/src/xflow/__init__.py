"""Cross-component API profiler: a preload agent plus offline ledger analysis."""

__version__ = "0.1.0"
