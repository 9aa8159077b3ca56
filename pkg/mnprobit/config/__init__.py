"""Run configuration: pydantic models and the layered loader."""
