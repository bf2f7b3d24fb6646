"""
Test suite for the risk-biased forecasting and planning pipeline.

This package contains unit tests and functional tests for every module.
"""
