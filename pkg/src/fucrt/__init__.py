"""Desk-scale federated class-level unlearning simulator.

Implements class-level unlearning by representation transformation:
transformation-class selection from second-highest-probability mass,
dual (local + global) class-aware contrastive alignment with prototype
aggregation, plus from-scratch / fine-tune / gradient-ascent baselines
and the evaluation stack (group metrics, membership inference, merge
diagnostics, embedding export).
"""

__version__ = "0.1.0"
