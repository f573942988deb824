"""Multi-task recommendation lab with attention-based knowledge transfer."""

__version__ = "0.1.0"
