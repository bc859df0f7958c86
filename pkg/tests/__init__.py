# tests/__init__.py
"""
Tests package for pedalign.
Contains unit tests per module and end-to-end pipeline tests on the bundled fixture.
"""
