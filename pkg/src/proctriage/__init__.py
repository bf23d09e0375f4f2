"""Static and dynamic triage of proctoring-style executables."""

__version__ = "0.1.0"
