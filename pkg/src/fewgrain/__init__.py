"""Few-shot fine-grained classification on CPU: a small autodiff engine, a
ConvNet-4 backbone, frequency-aware neighborhood encoding, cross-attention
modulation, episodic training/evaluation, and a synthetic corpus generator.
"""

__version__ = "0.1.0"
