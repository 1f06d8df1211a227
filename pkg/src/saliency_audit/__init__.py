"""Gradient explanations for waveform audio classifiers and their quantitative audit."""
