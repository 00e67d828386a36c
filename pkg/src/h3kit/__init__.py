"""State-space sequence models, FFT convolutions and the H3 layer in numpy."""

__version__ = "0.1.0"
