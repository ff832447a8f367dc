"""Spatio-temporal semi-supervised anomaly detection for calorimeter
digi-occupancy maps, with a transfer-learning harness.

Modules:
    core        domain types, parameter naming, on-disk formats
    synthgen    synthetic run generation
    preprocess  normalization pipeline, windows, channel graph
    model       CNN+GNN+RNN variational autoencoder
    transfer    parameter copying and freeze policies
    train       training loop and LR schedules
    inject      labeled anomaly injection
    score       reconstruction errors, standardized scores, thresholds
    evaluate    metrics and report artifacts
    pipeline    experiment orchestration
    cli         command-line entry points
"""

__version__ = "0.1.0"
