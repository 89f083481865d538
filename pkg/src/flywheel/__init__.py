"""Closed-loop improvement control plane for a mixture-of-experts RAG assistant."""

__version__ = "0.1.0"
