"""Nonnegative low-rank tensor completion through a dual factorization."""
