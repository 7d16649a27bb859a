"""AE-SMPN: per-flow delay prediction with autoencoder features and message passing."""

__version__ = "0.1.0"
