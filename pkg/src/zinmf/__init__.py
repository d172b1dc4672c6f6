"""Zero-inflated multi-study NMF with clustered, covariate-dependent scores."""

__version__ = "0.1.0"
