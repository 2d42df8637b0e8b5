"""Utility modules for coloc-retrieval."""
