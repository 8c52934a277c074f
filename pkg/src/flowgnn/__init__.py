"""Flow-graph neural intrusion detection."""

__version__ = "0.1.0"
