"""ethpace: what paces an Ethereum transaction.

A batch pipeline that ingests (or synthesizes) block/transaction dumps,
engineers rolling-window features over the prior 120 blocks, screens them for
correlation and redundancy, fits temporally-validated bagged regression
forests, and explains them with exact TreeSHAP, Scott-Knott ranking, partial
dependence, and feature-group ablations.
"""

__version__ = "0.1.0"
