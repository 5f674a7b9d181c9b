"""Workflow automation for forensic evidence processing."""

__version__ = "0.1.0"
