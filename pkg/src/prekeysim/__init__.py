"""Desk-scale simulator of prekey distribution, depletion attacks and countermeasures."""

__version__ = "0.1.0"
