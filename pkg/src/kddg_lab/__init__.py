"""Knowledge distillation with a confidence gradient filter for domain
generalization, on a synthetic multi-domain benchmark and mountain car."""

__version__ = "0.1.0"
