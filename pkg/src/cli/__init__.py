#!/usr/bin/env python3
"""
Command-line interface for ScaRR
"""

from .commands import build_parser, dispatch

__all__ = ['build_parser', 'dispatch']
