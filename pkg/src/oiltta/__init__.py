"""Online test-time adaptation (Tent, PL, OIL) for a toy span-prediction model."""

__version__ = "0.1.0"
