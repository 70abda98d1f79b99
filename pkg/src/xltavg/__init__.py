"""Checkpoint averaging for cross-lingual transfer."""
