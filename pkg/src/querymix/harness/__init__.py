"""Experiment harness: run configuration, the training/evaluation loop,
the perturbation and ablation studies, and the command line interface."""
