"""
Command-line application for the landmark pipeline.
"""

from app.main import main

__all__ = ["main"]
