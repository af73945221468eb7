"""Heralded GHZ / W entanglement between atomic ensembles and the Bell tests built on them."""
