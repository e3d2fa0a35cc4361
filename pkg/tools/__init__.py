"""metasv: meta-learning speaker verification on synthetic data."""
