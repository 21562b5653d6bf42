"""Desk-scale chest X-ray report curation, alignment training, and evaluation."""

__version__ = "0.1.0"
