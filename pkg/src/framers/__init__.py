"""Frame-masked video autoencoder, key-frame selector and key-frame codec."""

__version__ = "0.1.0"
