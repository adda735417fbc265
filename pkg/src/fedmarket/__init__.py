"""Federated data marketplace: privacy-preserving Wasserstein distances for
choosing how much data to buy from each seller, federated training engines
and the message protocol that ties buyer, sellers and platform together."""

__version__ = "0.1.0"
