# backend/__init__.py
"""
Core of pedalign: tutor schema, preference data, alignment losses,
the toy tutor policy with its training loops, and evaluation.
"""
