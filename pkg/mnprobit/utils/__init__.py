"""Errors, logging, random streams and file helpers."""
