"""Desk-scale expressive speech synthesis: seq2seq acoustic model with a
variational prosody latent and adversarial finetuning, plus an
autoregressive teacher vocoder distilled into a parallel flow student."""

__version__ = "0.1.0"
