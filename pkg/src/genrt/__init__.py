"""Multi-source domain adaptation where per-class normalizing flows fitted
to pseudo-labelled target features drive feature mixing and a consistency
loss on the classifier."""

__version__ = "0.1.0"
