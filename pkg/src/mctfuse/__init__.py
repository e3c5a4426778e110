"""Cross-modal multi-classification-token distillation and fusion for activated muscle group estimation."""
__version__ = "0.1.0"
