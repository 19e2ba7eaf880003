"""Source-guided pseudo-labelling domain adaptation for re-identification, at desk scale."""

__version__ = "0.1.0"
