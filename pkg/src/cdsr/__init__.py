"""Cross-domain sequential recommendation with partially aligned item representations."""

__version__ = "0.1.0"
