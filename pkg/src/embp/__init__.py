"""Blind channel estimation and symbol detection on linear ISI channels."""
