"""Dynamic feature prioritization for budgeted activity recognition on
video feature streams."""

__version__ = "0.1.0"
