"""Offline visualization of unlearning-run artifacts.

Reads the embedding CSVs and round JSONL files produced by the simulator
and renders 2-D projection scatters and metric-vs-round curves.
"""

__version__ = "0.1.0"
