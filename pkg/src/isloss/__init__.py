"""Importance-sampling robust losses."""
