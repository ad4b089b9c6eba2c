"""Configuration, file formats, orchestration and the CLI."""
