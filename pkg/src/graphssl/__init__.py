"""Graph-consistency semi-supervised learning at desk scale.

Pure-numpy implementation: a minimal tape autodiff (diffcore), an MLP
encoder with classifier/projection heads (model), FIFO memory banks with
temperature-softmax edges and transductive label propagation (graphbank),
the four consistency losses (losses), vector augmentations (augment),
synthetic 2-D datasets (data), and a deterministic training loop (trainer).
"""

__version__ = "0.1.0"
