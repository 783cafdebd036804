"""Bi-objective training of small sequence models under interpretability DAG priors."""

__version__ = "0.1.0"
