"""DeepCAT: mapping search queries to taxonomy categories with joint word-category representations."""

__version__ = '0.1.0'
