"""Condition-aware answer selection with a conditions reviser."""
