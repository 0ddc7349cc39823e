"""Options for models."""
