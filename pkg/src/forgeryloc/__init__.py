"""Frame-level detection and temporal localization of partially forged audio."""

__version__ = "0.1.0"
