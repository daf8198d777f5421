"""
AttrEx - feature attribution, explanation metrics and metric meta-evaluation
"""

__version__ = '0.1.0'
