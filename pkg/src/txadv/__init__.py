"""txadv: construct, attack, defend and tournament-evaluate classifiers over
sequences of financial transactions, on synthetic data."""

__version__ = "0.1.0"
