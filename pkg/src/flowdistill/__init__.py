"""Flow-matching teacher, one-step IMLE student, and a latency-aware closed-loop bench."""

__version__ = "0.1.0"
