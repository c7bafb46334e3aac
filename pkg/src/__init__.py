"""
forgesem - Core Package
Decoupled forgery semantics for generalizable DeepFake detection.
"""

__version__ = "1.0.0"
