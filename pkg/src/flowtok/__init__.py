"""flowtok: a desk-scale lab for flow-semantic visual tokenizers and
rectified-flow latent diffusion transformers."""

__version__ = "0.1.0"
