"""gmannot: train annotators for a frozen procedural generator by matching
segmentation-network gradients, plus the baselines and harness around it.
"""

__version__ = "0.1.0"
