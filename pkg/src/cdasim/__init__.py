"""Agent-based continuous double auction market simulator with RL market
makers and liquidity takers."""

__version__ = "0.1.0"
