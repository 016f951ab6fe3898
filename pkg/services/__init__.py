"""Numerical services: elliptic solves, coefficients, forward model, measurements and reconstruction."""
