"""Command-line entry point and plotting."""
