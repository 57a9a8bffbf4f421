"""Speech-enhancement lab: cIRM denoising, MOS surrogates, evolutionary search and SRT simulation."""

__version__ = "0.1.0"
