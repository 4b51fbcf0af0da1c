"""Source-stream sequence classifiers whose representation learning is
compensated by an auxiliary feature stream through residual adaptation and
distribution-alignment losses, on fully synthetic multimodal data."""

__version__ = "0.1.0"
