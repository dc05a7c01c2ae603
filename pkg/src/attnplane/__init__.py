"""Desk-scale simulator for quantized linear-attention inference on
programmable dataplanes, with ternary rule matching, cascade fusion, and a
two-timescale control/data-plane adaptation loop."""

__version__ = "0.1.0"
