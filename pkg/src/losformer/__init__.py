"""Hospital length-of-stay prediction from admission event sequences.

End-to-end desk-scale pipeline: synthetic cohort generation with a
planted severity signal, demographic-aware measurement binning into
token sequences, a from-scratch transformer encoder with hand-derived
backpropagation, a classical tabular baseline, and evaluation tooling.
"""

__version__ = "0.1.0"
