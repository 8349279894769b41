"""Weakly supervised audio source separation.

Trains one autoencoder per source class on mixture spectrograms annotated
only with class-presence labels, then separates mixtures by soft
time-frequency masking of the per-class estimates.
"""

__version__ = "0.1.0"
