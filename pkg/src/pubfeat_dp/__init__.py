"""Differentially private training of two-tower models with public item features.

The item-side encoder operates on a public feature matrix while user embeddings
and labels are private. Instead of noising gradients, the trainers in this
package noise small per-item sufficient statistics and rebuild the gradient
from them.
"""

__version__ = "0.1.0"
