"""Tutor-log analytics: student modeling, KC model comparison, and
practice-policy simulation."""

__version__ = "0.1.0"
