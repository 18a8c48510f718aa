"""Slot attention with a fg/bg indicator, context fusion and a bootstrap adapter, on synthetic scenes."""

__version__ = "0.1.0"
