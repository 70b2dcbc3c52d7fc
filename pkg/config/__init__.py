#!/usr/bin/env python3
"""
Package config - layered configuration of WeakGround (defaults, JSON file, flags)
"""

__version__ = "1.0.0"
