"""Test-time guidance of robot base policies with generated guidance scripts."""

__version__ = "0.1.0"
