# Generative Predictive Control lab - Source Package
"""
Sampling-based predictive control, flow-matching policies and the training
loop that couples them
"""

__version__ = "1.0.0"
