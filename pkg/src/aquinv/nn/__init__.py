"""Numpy implementation of the dense encoder-decoder surrogate."""
