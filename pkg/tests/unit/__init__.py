"""
Unit tests package.

Contains unit tests for individual modules: math, models, planner and experiments.
"""
