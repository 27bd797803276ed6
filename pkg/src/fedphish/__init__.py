"""Deterministic role-aware federated learning simulator for multi-modal
phishing webpage detection (image embeddings, HTML streams, URL embeddings).
"""

__version__ = "0.1.0"
