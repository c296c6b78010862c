"""Dense contrastive pretraining with dense negative pairs, at desk scale."""

__version__ = "0.1.0"
