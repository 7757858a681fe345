"""Cross-domain disentanglement: shared/exclusive representations learned by
bidirectional adversarial translation and cross-domain autoencoders."""

__version__ = "0.1.0"
