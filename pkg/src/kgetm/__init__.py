"""Knowledge-graph embedded topic model for EHR codes."""

__version__ = "0.1.0"
