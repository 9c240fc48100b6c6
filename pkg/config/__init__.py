"""
Configuration package for the FHM tools.
Holds default hyperparameters, the fuzzy membership table and the built-in topologies.
"""
