"""Block-wise genome-wide association testing on aggregated SNP clusters."""

__version__ = "0.1.0"
