"""wfcopilot: staged deployment and unified telemetry for multi-application workflows."""

__version__ = "0.1.0"
