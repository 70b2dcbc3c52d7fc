#!/usr/bin/env python3
"""
Package utils - helper modules of WeakGround (logging, command-line parsing)
"""

__version__ = "1.0.0"
