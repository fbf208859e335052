"""regionflow: urban region embeddings from hourly inbound/outbound trip flows.

The pipeline turns raw trip records into per-region hourly flow time series,
trains a trio of dilated-convolution encoders with contrastive objectives,
and scores the frozen embeddings with a ridge-regression linear probe.
Submodules are importable independently; only the model-side modules
(`model`, `losses`, `train`) require torch.
"""

__version__ = "0.1.0"
