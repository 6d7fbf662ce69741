"""Configuration, training loop, experiment drivers, plots and the CLI."""
