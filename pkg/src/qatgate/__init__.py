"""Multi-timescale quantum averaging for driven spin-boson gates."""
__version__ = "0.1.0"
