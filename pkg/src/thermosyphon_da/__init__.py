"""Ensemble data assimilation and dynamic mode decomposition for a
convection-loop (thermosyphon) twin-experiment laboratory."""

__version__ = "0.1.0"
