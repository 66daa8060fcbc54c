"""Link-level MIMO-OFDM simulation, classical CSI estimation and token export."""

__version__ = "0.1.0"
