"""SDNet deep MIMO detection with learngene knowledge transfer."""

__version__ = "0.1.0"
