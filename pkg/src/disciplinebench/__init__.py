"""Discipline-stability benchmark: pricing and bidding POMDPs, learners, trace diagnostics."""

__version__ = "0.1.0"
