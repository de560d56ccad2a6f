"""Knowledge distillation from a single image or audio clip."""

__version__ = "0.1.0"
