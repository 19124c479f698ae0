"""Hierarchical scalable-query classification on fusion transformers."""

from ._malloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"
