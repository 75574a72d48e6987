"""Hyper-edge transformers for skeletal action recognition, in numpy."""

__version__ = "0.1.0"
