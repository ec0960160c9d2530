"""Native fixture programs and the brute-force event oracle used by the tests."""

from .build import Fixtures, ToolchainMissing, build_fixtures, peak_rss_kb
from .oracle import OracleEvent, oracle_counts, read_oracle

__all__ = ["Fixtures", "ToolchainMissing", "build_fixtures", "peak_rss_kb", "OracleEvent", "oracle_counts", "read_oracle"]
