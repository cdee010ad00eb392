"""Markov-chain primitives and the environment factor."""
