"""Static malware detection for robot controller ELF binaries.

The pipeline: extract controller bytes from an ELF section, tokenize them
into a fixed-length byte sequence, classify with a bidirectional LSTM (or
one of the GRU/CNN/ANN baselines) trained from scratch on a synthetic,
behaviorally labeled corpus.
"""

__version__ = "0.1.0"
