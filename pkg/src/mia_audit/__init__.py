"""Membership-inference auditing: victims, adversaries, defenses, reports."""

__version__ = "0.1.0"
