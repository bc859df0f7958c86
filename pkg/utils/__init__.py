# utils/__init__.py
"""
Configuration, logging and file I/O helpers for pedalign.
"""
