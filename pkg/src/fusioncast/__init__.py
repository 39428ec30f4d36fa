"""Dual-branch multimodal time-series forecasting toolkit.

One branch reasons over exogenous text with a chat-model pipeline guided by a
retrieval knowledge base of corrected past reasoning; the other encodes the
numeric series and aligns it with generated statistics text. The two horizon
forecasts are fused per frequency band with learnable weights.
"""

__version__ = "0.1.0"
