"""Synthetic 650-sample corpus transcribed from the published per-family tables."""
