"""Core modules for coloc-retrieval."""
