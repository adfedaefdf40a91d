"""Simulated nanowire single-photon detection and pulse classification."""
