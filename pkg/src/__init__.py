#!/usr/bin/env python3
"""
Package src - WeakGround core (autodiff, geometry, synthetic world, parser, model, training, evaluation)
"""

__version__ = "1.0.0"
