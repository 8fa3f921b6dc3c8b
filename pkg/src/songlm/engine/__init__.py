"""Instrumented autoregressive decode engine."""
