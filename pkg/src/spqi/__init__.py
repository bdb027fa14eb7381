"""Shopping product question identification: features, MoE mixing, graph attention."""

__version__ = "0.1.0"
