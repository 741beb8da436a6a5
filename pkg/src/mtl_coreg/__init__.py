"""Two-view co-regularized multi-task learning toolkit.

Core pieces: shared math kernels (``numerics``), the two-view model with
its four training losses and exact gradients (``model``), synthetic
correlated multi-label data with batch balancing (``synthdata``), the
checkpointing train loop with noisy-label filtering (``trainloop``),
challenge metrics and per-task selection (``selection``), and the batch
CLI (``cli``).
"""

__version__ = "0.1.0"
