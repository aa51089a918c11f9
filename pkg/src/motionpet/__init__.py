"""Simulated PET head-motion study: phantoms, list-mode simulation, motion-compensated
OSEM, random-encoder features and linear classifiers."""
__version__ = "0.1.0"
