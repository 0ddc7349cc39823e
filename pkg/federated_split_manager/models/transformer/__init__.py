"""Split transformer encoder files."""
