"""Label-free expression editing via identity/expression disentanglement."""

__version__ = "0.1.0"
