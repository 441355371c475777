"""Softmax bounds, linearizations and a desk-scale ensemble verifier."""

from softbound.config import VERSION, APP_NAME

__all__ = ['VERSION', 'APP_NAME']
