"""Shared exception base for the package."""


class TutorkitError(Exception):
    """Base class for all data and model errors raised by tutorkit."""
