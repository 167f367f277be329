"""Experiment orchestration: configs, metrics logs, mask quality, plots and the command line."""
