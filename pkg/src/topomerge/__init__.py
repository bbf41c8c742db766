"""Structure-free topometric mapping with multi-session map merging."""

__version__ = "0.1.0"
