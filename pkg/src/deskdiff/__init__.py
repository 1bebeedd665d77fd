"""deskdiff: a desk-scale text-to-image diffusion lab.

Implements a tiny but complete T2I stack (tokenizer, text encoder, latent
diffusion with an optional linear autoencoder), two personalization-style
backdoor injection methods operating on it, an attack-success-rate
measurement harness, and dictionary/weight-drift defenses.
"""

__version__ = "0.1.0"
