"""
Expose some package metadata.
"""

__version__ = "0.1.0"
