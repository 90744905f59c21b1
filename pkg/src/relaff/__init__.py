"""Context-attention video regression with a relational (label-similarity) loss, in numpy."""

__version__ = "0.1.0"
