"""
Functional tests package.

Contains functional tests that drive the pipeline end-to-end through the command line.
"""
