"""Experiment drivers, report emission and the command-line interface."""
