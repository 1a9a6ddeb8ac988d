"""Datasets, training, persistence and model pools."""
