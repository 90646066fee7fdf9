"""Strength-controlled DDIM image refiner driven by a JSON manifest."""

__version__ = "0.1.0"
