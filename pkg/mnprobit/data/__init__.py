"""CSV and JSON readers and writers."""
