"""Knowledge distillation from a neural-network teacher into a TSK fuzzy classifier."""

__version__ = "0.1.0"
