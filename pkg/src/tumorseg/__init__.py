"""Brain-tumor segmentation toolkit: cartoon-model segmentation, graph-cut post-processing, octave networks."""

__version__ = "0.1.0"
