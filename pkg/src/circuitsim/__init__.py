"""circuitsim: deterministic discrete-event simulator of circuit selection
in a Tor-like anonymity network, with relay- and AS-level adversary analysis."""

__version__ = "0.1.0"
