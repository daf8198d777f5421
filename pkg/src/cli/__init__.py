"""
Command-line front end for the AttrEx pipeline
"""

from .commands import main

__all__ = ['main']
