"""Desk-scale image difference captioning with multi-scale differential perception."""

__version__ = "0.1.0"
