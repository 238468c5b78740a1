"""Availability-poisoning attacks, defenses and representation analysis at desk scale."""

__version__ = "0.1.0"
