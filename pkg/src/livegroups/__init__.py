"""Live group detection for mobile wireless networks by max-consensus."""

__version__ = "0.1.0"
